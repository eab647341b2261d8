//! SGD with Nesterov momentum and the step learning-rate schedule.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::network::{GradMap, ParamMap};
use crate::tensor::Tensor;

/// Per-parameter velocity state, created lazily on first update.
#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: std::collections::BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One optimizer step in Nesterov form:
/// `d = g + wd * theta; v <- mu * v + d; theta <- theta - lr * (d + mu * v)`.
///
/// Only parameters with a gradient entry are touched; frozen names and
/// parameters outside the differentiated path stay bitwise identical.
pub fn sgd_step(
    params: &mut ParamMap,
    grads: &GradMap,
    state: &mut SgdState,
    frozen: &BTreeSet<String>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, grad) in grads {
        if frozen.contains(name) {
            return Err(Error::usage(format!(
                "gradient supplied for frozen parameter {name}"
            )));
        }
        let theta = params
            .get_mut(name)
            .ok_or_else(|| Error::usage(format!("gradient for unknown parameter {name}")))?;
        if theta.shape() != grad.shape() {
            return Err(Error::usage(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                theta.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(grad.shape()));
        let td = theta.data_mut();
        let vd = v.data_mut();
        let gd = grad.data();
        for i in 0..gd.len() {
            let d = gd[i] + weight_decay * td[i];
            vd[i] = momentum * vd[i] + d;
            td[i] -= lr * (d + momentum * vd[i]);
        }
    }
    Ok(())
}

/// Step schedule: the base rate divided by 10 at every milestone reached.
/// Epochs are 1-based; from epoch `m` onward the rate includes milestone `m`.
pub fn lr_at(epoch: usize, base_lr: f64, milestones: &[usize]) -> f64 {
    let drops = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * 0.1f64.powi(drops as i32)
}
