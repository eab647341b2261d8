#![allow(dead_code)]

//! Shared builders for integration tests: the desk-scale network zoo and the
//! synthetic data setup.

use kdlab::data::{gen_synthetic, AugmentConfig, Dataset, Normalization, SynthSpec};
use kdlab::distill::{DistillConfig, MethodName, ProjectorSettings, SplitData};
use kdlab::layer::{LayerSpec, Shape};
use kdlab::network::NetworkSpec;

pub fn conv_bn_relu(in_ch: usize, out_ch: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv {
            in_ch,
            out_ch,
            kernel: 3,
            depthwise: false,
        },
        LayerSpec::BatchNorm { channels: out_ch },
        LayerSpec::Relu,
    ]
}

/// Three-block conv net on 8x8 inputs: widths (w1, w2, w3), pooling to 2x2
/// maps before the head.
pub fn cnn(widths: (usize, usize, usize), classes: usize, in_ch: usize) -> NetworkSpec {
    let (w1, w2, w3) = widths;
    let mut encoder = Vec::new();
    encoder.extend(conv_bn_relu(in_ch, w1));
    encoder.extend(conv_bn_relu(w1, w2));
    encoder.push(LayerSpec::AvgPool { window: 2 });
    encoder.extend(conv_bn_relu(w2, w3));
    encoder.push(LayerSpec::AvgPool { window: 2 });
    encoder.push(LayerSpec::GlobalAvgPool);
    encoder.push(LayerSpec::Flatten);
    NetworkSpec {
        input: Shape::Map {
            c: in_ch,
            h: 8,
            w: 8,
        },
        encoder,
        block_boundaries: vec![3, 7, 13],
        feature_dim: w3,
        num_classes: classes,
    }
}

/// Tiny two-conv net on 4x4 inputs for fast pipeline tests.
pub fn tiny_cnn(widths: (usize, usize), classes: usize, in_ch: usize) -> NetworkSpec {
    let (w1, w2) = widths;
    let mut encoder = Vec::new();
    encoder.extend(conv_bn_relu(in_ch, w1));
    encoder.extend(conv_bn_relu(w1, w2));
    encoder.push(LayerSpec::AvgPool { window: 2 });
    encoder.push(LayerSpec::GlobalAvgPool);
    encoder.push(LayerSpec::Flatten);
    NetworkSpec {
        input: Shape::Map {
            c: in_ch,
            h: 4,
            w: 4,
        },
        encoder,
        block_boundaries: vec![3, 9],
        feature_dim: w2,
        num_classes: classes,
    }
}

pub fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    gen_synthetic(&SynthSpec {
        classes: 3,
        per_class: 16,
        test_per_class: 8,
        height: 4,
        width: 4,
        channels: 2,
        difficulty: 0.7,
        seed,
        max_shift: 1,
    })
    .unwrap()
}

pub fn tiny_split<'a>(train: &'a Dataset, test: &'a Dataset) -> SplitData<'a> {
    SplitData {
        train,
        test,
        norm: Normalization {
            means: vec![0.5, 0.5],
            stds: vec![0.25, 0.25],
        },
        augment: AugmentConfig {
            hflip_prob: 0.5,
            pad: 1,
            crop: true,
        },
    }
}

pub fn fast_cfg(method: MethodName, epochs: usize, seed: u64) -> DistillConfig {
    DistillConfig {
        method,
        alpha: None,
        k: None,
        variant: None,
        temperature: 4.0,
        epochs,
        batch_size: 16,
        lr: 0.05,
        lr_milestones: vec![],
        momentum: 0.9,
        weight_decay: 5e-4,
        seed,
        projector: ProjectorSettings::default(),
    }
}

/// The calibrated desk-scale experiment: 10-class 8x8x3 data, a (16,16,32)
/// teacher against a (4,4,8) student.
pub struct DeskScale {
    pub synth: SynthSpec,
    pub teacher_spec: NetworkSpec,
    pub student_spec: NetworkSpec,
    pub norm: Normalization,
    pub augment: AugmentConfig,
}

pub fn desk_scale() -> DeskScale {
    DeskScale {
        synth: SynthSpec {
            classes: 10,
            per_class: 40,
            test_per_class: 20,
            height: 8,
            width: 8,
            channels: 3,
            difficulty: 0.55,
            seed: 2024,
            max_shift: 1,
        },
        teacher_spec: cnn((16, 16, 32), 10, 3),
        student_spec: cnn((4, 4, 8), 10, 3),
        norm: Normalization {
            means: vec![0.5; 3],
            stds: vec![0.25; 3],
        },
        augment: AugmentConfig {
            hflip_prob: 0.5,
            pad: 1,
            crop: true,
        },
    }
}

pub fn desk_cfg(method: MethodName, seed: u64) -> DistillConfig {
    DistillConfig {
        method,
        alpha: None,
        k: None,
        variant: None,
        temperature: 4.0,
        epochs: 40,
        batch_size: 64,
        lr: 0.05,
        lr_milestones: vec![20, 30, 35],
        momentum: 0.9,
        weight_decay: 5e-4,
        seed,
        projector: ProjectorSettings::default(),
    }
}
