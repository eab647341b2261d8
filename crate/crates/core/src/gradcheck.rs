//! Central finite differences, the gradient oracle used across the test and
//! acceptance suites and by the `gradcheck` CLI command.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, Shape};
use crate::losses;
use crate::network::{Mode, Net};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + h e_i) - f(x - h e_i)) / (2h)` per coordinate.
///
/// `f` must be pure and finite near `x`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 || !h.is_finite() {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let g = (fp - fm) / (2.0 * h);
        if !g.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite finite-difference quotient at coordinate {i}"
            )));
        }
        grad.data_mut()[i] = g;
    }
    Ok(grad)
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: `|a - b| / max(|a|, |b|, 1e-8)` over the whole tensors.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let na = analytic.norm();
    let nb = numeric.norm();
    diff / na.max(nb).max(1e-8)
}

// ---------------------------------------------------------------------------
// the full finite-difference suite
// ---------------------------------------------------------------------------

/// Result of one suite item: worst relative error over all its instances.
#[derive(Debug, Clone)]
pub struct SuiteItem {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

pub const SUITE_TOLERANCE: f64 = 1e-6;

fn suite_layers() -> Vec<(&'static str, LayerSpec, Shape)> {
    vec![
        (
            "dense",
            LayerSpec::Dense {
                input: 5,
                output: 4,
                bias: true,
            },
            Shape::Vector { c: 5 },
        ),
        (
            "dense_no_bias",
            LayerSpec::Dense {
                input: 5,
                output: 4,
                bias: false,
            },
            Shape::Vector { c: 5 },
        ),
        (
            "conv3x3",
            LayerSpec::Conv {
                in_ch: 2,
                out_ch: 3,
                kernel: 3,
                depthwise: false,
            },
            Shape::Map { c: 2, h: 4, w: 4 },
        ),
        (
            "conv1x1",
            LayerSpec::Conv {
                in_ch: 3,
                out_ch: 2,
                kernel: 1,
                depthwise: false,
            },
            Shape::Map { c: 3, h: 4, w: 4 },
        ),
        (
            "conv3x3_depthwise",
            LayerSpec::Conv {
                in_ch: 3,
                out_ch: 3,
                kernel: 3,
                depthwise: true,
            },
            Shape::Map { c: 3, h: 4, w: 4 },
        ),
        (
            "batch_norm",
            LayerSpec::BatchNorm { channels: 3 },
            Shape::Map { c: 3, h: 3, w: 3 },
        ),
        ("relu", LayerSpec::Relu, Shape::Map { c: 2, h: 4, w: 4 }),
        (
            "avg_pool",
            LayerSpec::AvgPool { window: 2 },
            Shape::Map { c: 2, h: 4, w: 4 },
        ),
        (
            "global_avg_pool",
            LayerSpec::GlobalAvgPool,
            Shape::Map { c: 3, h: 4, w: 4 },
        ),
        (
            "flatten",
            LayerSpec::Flatten,
            Shape::Map { c: 2, h: 3, w: 3 },
        ),
    ]
}

/// Check one layer instance: analytic input and parameter gradients of
/// `sum(forward(x) * probe)` against central differences.
fn check_layer_instance(layer: &LayerSpec, input_shape: Shape, seed: u64) -> Result<f64> {
    let rng = Rng::new(seed);
    let net = Net::build(vec![layer.clone()], input_shape, "g", &rng)?;
    let mut data_rng = rng.child("data");
    let batch = 2usize;
    let mut x = Tensor::uniform(&input_shape.batched(batch), -1.0, 1.0, &mut data_rng);
    if matches!(layer, LayerSpec::Relu) {
        // keep pre-activations away from the kink so central differences stay
        // exact for the piecewise-linear map
        x = x.map(|v| v + 0.2 * v.signum());
    }
    let pass = net.forward(&x, Mode::Train)?;
    let probe = Tensor::uniform(pass.output().shape(), -1.0, 1.0, &mut data_rng);
    let empty = BTreeSet::new();
    let (param_grads, input_grad) = net.backward(&pass, &[(1, probe.clone())], &empty)?;

    let mut worst: f64 = 0.0;
    let score = |analytic: &Tensor, fd: &Tensor| relative_error(analytic, fd);

    // input gradient
    let f_input = |t: &Tensor| -> Result<f64> {
        let p = net.forward(t, Mode::Train)?;
        Ok(p.output()
            .data()
            .iter()
            .zip(probe.data())
            .map(|(&o, &pr)| o * pr)
            .sum())
    };
    let fd_input = finite_diff_grad(f_input, &x, DEFAULT_STEP)?;
    worst = worst.max(score(&input_grad, &fd_input));

    // parameter gradients
    for (name, analytic) in &param_grads {
        let base = net
            .params()
            .get(name)
            .expect("gradient names come from the net");
        let f_param = |t: &Tensor| -> Result<f64> {
            let mut n = net.clone();
            n.params_mut().insert(name.clone(), t.clone());
            let p = n.forward(&x, Mode::Train)?;
            Ok(p.output()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(&o, &pr)| o * pr)
                .sum())
        };
        let fd = finite_diff_grad(f_param, base, DEFAULT_STEP)?;
        worst = worst.max(score(analytic, &fd));
    }
    Ok(worst)
}

fn check_loss_instance(name: &str, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let n = 2usize;
    let k = 5usize;
    let c = 8usize;
    let s = Tensor::uniform(&[n, k], -2.0, 2.0, &mut rng);
    let t = Tensor::uniform(&[n, k], -2.0, 2.0, &mut rng);
    let labels = losses::one_hot(&[rng.next_below(k) as u8, rng.next_below(k) as u8], k)?;
    let f_t = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
    let f_s = Tensor::uniform(&[n, c], -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(&[k, c], -1.0, 1.0, &mut rng);

    let (analytic, fd) = match name {
        "cross_entropy" => {
            let a = losses::cross_entropy(&s, &labels)?;
            let fd = finite_diff_grad(
                |l| losses::cross_entropy(l, &labels).map(|v| v.value),
                &s,
                DEFAULT_STEP,
            )?;
            (a.grad, fd)
        }
        "kd_t1" | "kd_t4" => {
            let temp = if name == "kd_t1" { 1.0 } else { 4.0 };
            let a = losses::kd_loss(&s, &t, &labels, temp)?;
            let fd = finite_diff_grad(
                |l| losses::kd_loss(l, &t, &labels, temp).map(|v| v.value),
                &s,
                DEFAULT_STEP,
            )?;
            (a.grad, fd)
        }
        "align_l2" => {
            let a = losses::simkd_loss(&f_t, &f_s)?;
            let fd = finite_diff_grad(
                |f| losses::simkd_loss(&f_t, f).map(|v| v.value),
                &f_s,
                DEFAULT_STEP,
            )?;
            (a.grad, fd)
        }
        "output_l2" => {
            let a = losses::output_l2_loss(&w, &f_t, &f_s)?;
            let fd = finite_diff_grad(
                |f| losses::output_l2_loss(&w, &f_t, f).map(|v| v.value),
                &f_s,
                DEFAULT_STEP,
            )?;
            (a.grad, fd)
        }
        "combined_l2" => {
            let a = losses::combined_l2_loss(&w, &f_t, &f_s)?;
            let fd = finite_diff_grad(
                |f| losses::combined_l2_loss(&w, &f_t, f).map(|v| v.value),
                &f_s,
                DEFAULT_STEP,
            )?;
            (a.grad, fd)
        }
        "joint_a0" | "joint_a05" | "joint_a1" => {
            let alpha = match name {
                "joint_a0" => 0.0,
                "joint_a05" => 0.5,
                _ => 1.0,
            };
            // check both routes: perturb logits and features jointly by
            // concatenating the two gradients
            let kd = losses::kd_loss(&s, &t, &labels, 4.0)?;
            let al = losses::simkd_loss(&f_t, &f_s)?;
            let j = losses::joint_loss(alpha, &kd, &al)?;
            let fd_logits = finite_diff_grad(
                |l| {
                    let kd = losses::kd_loss(l, &t, &labels, 4.0)?;
                    let al = losses::simkd_loss(&f_t, &f_s)?;
                    Ok(losses::joint_loss(alpha, &kd, &al)?.value)
                },
                &s,
                DEFAULT_STEP,
            )?;
            let fd_feats = finite_diff_grad(
                |f| {
                    let kd = losses::kd_loss(&s, &t, &labels, 4.0)?;
                    let al = losses::simkd_loss(&f_t, f)?;
                    Ok(losses::joint_loss(alpha, &kd, &al)?.value)
                },
                &f_s,
                DEFAULT_STEP,
            )?;
            let mut analytic = j.grad_logits.into_data();
            analytic.extend(j.grad_features.into_data());
            let mut fd = fd_logits.into_data();
            fd.extend(fd_feats.into_data());
            let len = analytic.len();
            (
                Tensor::new(vec![len], analytic)?,
                Tensor::new(vec![len], fd)?,
            )
        }
        other => return Err(Error::usage(format!("unknown loss suite item {other}"))),
    };
    Ok(relative_error(&analytic, &fd))
}

/// Run the full finite-difference suite: every layer kind and every loss,
/// `instances` seeded cases each. Items pass when the worst relative error
/// stays below [`SUITE_TOLERANCE`].
pub fn run_gradient_suite(instances: usize) -> Result<Vec<SuiteItem>> {
    let mut items = Vec::new();
    for (name, layer, shape) in suite_layers() {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            worst = worst.max(check_layer_instance(&layer, shape, 0x1a7e5 + i as u64)?);
        }
        items.push(SuiteItem {
            name: format!("layer/{name}"),
            instances,
            max_rel_err: worst,
            pass: worst < SUITE_TOLERANCE,
        });
    }
    for name in [
        "cross_entropy",
        "kd_t1",
        "kd_t4",
        "align_l2",
        "output_l2",
        "combined_l2",
        "joint_a0",
        "joint_a05",
        "joint_a1",
    ] {
        let mut worst: f64 = 0.0;
        for i in 0..instances {
            worst = worst.max(check_loss_instance(name, 0xc0ffe + i as u64)?);
        }
        items.push(SuiteItem {
            name: format!("loss/{name}"),
            instances,
            max_rel_err: worst,
            pass: worst < SUITE_TOLERANCE,
        });
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.0, 5.0, 2.5, -0.7]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.sum()), &x, DEFAULT_STEP).unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_norm_gradient() {
        // f(x) = ||x||^2 at [1, 2] has gradient [2, 4].
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn degree_two_polynomial_matches_analytic() {
        // f(x) = sum(3 x_i^2 - 2 x_i + 1); grad = 6 x - 2.
        let x = Tensor::new(vec![4], vec![0.5, -0.25, 1.5, -2.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| 3.0 * v * v - 2.0 * v + 1.0).sum()),
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - (6.0 * xv - 2.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_evaluation_is_reported() {
        // ln is NaN left of zero, so probing x=0 must produce a numeric error.
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let r = finite_diff_grad(|t| Ok(t.data()[0].ln()), &x, DEFAULT_STEP);
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, 0.0).is_err());
        assert!(finite_diff_grad(|t| Ok(t.sum()), &x, -1e-5).is_err());
    }
}
