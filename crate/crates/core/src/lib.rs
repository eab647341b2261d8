//! Desk-scale knowledge-distillation laboratory.
//!
//! A deterministic f64 tensor core with explicit layer-wise backpropagation,
//! the classifier-reuse distillation family (feature alignment through a
//! bottleneck projector, reused teacher heads, multi-teacher variants), exact
//! parameter/pruning-ratio accounting, and a seeded experiment harness with
//! binary dataset/checkpoint formats and CSV metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layer;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod projector;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
