//! Dimension-matching projector: construction of the bottleneck stack and its
//! ablation variants, the closed-form parameter count, the halving-inequality
//! check, spatial alignment pooling, and the linear-projector merge.
//!
//! Convolutions are bias-free and every conv is followed by batch norm and
//! ReLU, so the materialized parameter count of the bottleneck equals
//! `C_t (C_s + C_t + 4) / r + 9 C_t^2 / r^2 + 2 C_t` exactly:
//! `C_s C_t / r + 9 C_t^2 / r^2 + C_t^2 / r` from the three conv kernels and
//! `4 C_t / r + 2 C_t` from the affine batch-norm pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{LayerSpec, Shape};
use crate::network::Net;
use crate::rng::Rng;
use crate::tensor::{avg_pool, matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// Single 1x1 conv + BN + ReLU.
    OneConv,
    /// Two 1x1 convs, each + BN + ReLU; the first maps into the bottleneck
    /// width `C_t / r`.
    TwoConv,
    /// Bottleneck with a depthwise 3x3 middle conv.
    BottleneckDw,
    /// Default: 1x1 down, 3x3 within the bottleneck, 1x1 up; BN + ReLU after
    /// each conv.
    Bottleneck,
    /// A single dense map `C_s -> C_t` with bias and no BN/ReLU, operating on
    /// feature vectors; algebraically mergeable into a classifier.
    LinearVector,
}

/// Full projector description. `c_s`/`c_t` are the student/teacher channel
/// extents at the alignment point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    pub r: usize,
    pub c_s: usize,
    pub c_t: usize,
    pub spatial_align: bool,
}

impl ProjectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.c_s == 0 || self.c_t == 0 {
            return Err(Error::config("projector extents must be positive"));
        }
        match self.kind {
            ProjectorKind::Bottleneck | ProjectorKind::BottleneckDw | ProjectorKind::TwoConv => {
                if self.c_t % self.r != 0 {
                    return Err(Error::config(format!(
                        "reduction factor {} does not divide teacher channels {}",
                        self.r, self.c_t
                    )));
                }
            }
            ProjectorKind::OneConv | ProjectorKind::LinearVector => {}
        }
        Ok(())
    }

    /// Layer stack for this projector.
    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let (c_s, c_t) = (self.c_s, self.c_t);
        let mid = c_t / self.r;
        let conv = |i, o, k, dw| LayerSpec::Conv {
            in_ch: i,
            out_ch: o,
            kernel: k,
            depthwise: dw,
        };
        let bn = |c| LayerSpec::BatchNorm { channels: c };
        Ok(match self.kind {
            ProjectorKind::OneConv => {
                vec![conv(c_s, c_t, 1, false), bn(c_t), LayerSpec::Relu]
            }
            ProjectorKind::TwoConv => vec![
                conv(c_s, mid, 1, false),
                bn(mid),
                LayerSpec::Relu,
                conv(mid, c_t, 1, false),
                bn(c_t),
                LayerSpec::Relu,
            ],
            ProjectorKind::BottleneckDw => vec![
                conv(c_s, mid, 1, false),
                bn(mid),
                LayerSpec::Relu,
                conv(mid, mid, 3, true),
                bn(mid),
                LayerSpec::Relu,
                conv(mid, c_t, 1, false),
                bn(c_t),
                LayerSpec::Relu,
            ],
            ProjectorKind::Bottleneck => vec![
                conv(c_s, mid, 1, false),
                bn(mid),
                LayerSpec::Relu,
                conv(mid, mid, 3, false),
                bn(mid),
                LayerSpec::Relu,
                conv(mid, c_t, 1, false),
                bn(c_t),
                LayerSpec::Relu,
            ],
            ProjectorKind::LinearVector => {
                vec![LayerSpec::Dense {
                    input: c_s,
                    output: c_t,
                    bias: true,
                }]
            }
        })
    }

    pub fn is_vector_kind(&self) -> bool {
        matches!(self.kind, ProjectorKind::LinearVector)
    }
}

pub const PROJECTOR_PREFIX: &str = "proj";

/// Materialize a projector as a network stack at the given input shape.
pub fn build_projector(spec: &ProjectorSpec, input: Shape, rng: &Rng) -> Result<Net> {
    match (spec.is_vector_kind(), input) {
        (true, Shape::Vector { c }) | (false, Shape::Map { c, .. }) => {
            if c != spec.c_s {
                return Err(Error::config(format!(
                    "projector expects {} input channels, alignment point has {c}",
                    spec.c_s
                )));
            }
        }
        (true, s) => {
            return Err(Error::config(format!(
                "linear_vector projector needs vector features, got {s}"
            )))
        }
        (false, s) => {
            return Err(Error::config(format!(
                "convolutional projector needs feature maps, got {s}"
            )))
        }
    }
    Net::build(spec.layers()?, input, PROJECTOR_PREFIX, rng)
}

/// Closed-form parameter count of the bottleneck projector:
/// `F(r) = C_t (C_s + C_t + 4) / r + 9 C_t^2 / r^2 + 2 C_t`.
/// Exact integer arithmetic; requires `r | C_t`.
pub fn projector_param_formula(c_s: u64, c_t: u64, r: u64) -> Result<u64> {
    if r == 0 || c_t == 0 {
        return Err(Error::config("extents must be positive"));
    }
    if c_t % r != 0 {
        return Err(Error::config(format!(
            "reduction factor {r} does not divide teacher channels {c_t}"
        )));
    }
    let mid = c_t / r; // C_t / r
    Ok(mid * (c_s + c_t + 4) + 9 * mid * mid + 2 * c_t)
}

/// Result of checking `2 F(2r) < F(r) < 4 F(2r)` in exact arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropositionCheck {
    pub left_holds: bool,
    pub right_holds: bool,
    /// The analytic condition for the left inequality: `C_t > 4 r^2 / 9`.
    pub left_condition: bool,
}

/// Evaluate the halving inequality exactly. Denominators are cleared by
/// scaling both sides with `4 r^2 > 0`, so no rounding occurs even when
/// `F(2r)` is not integral:
/// `4 r^2 F(r)  = 4 A r + 4 B + 4 C r^2` and
/// `4 r^2 F(2r) = 2 A r + B + 4 C r^2`, with
/// `A = C_t (C_s + C_t + 4)`, `B = 9 C_t^2`, `C = 2 C_t`.
pub fn check_proposition(c_s: u64, c_t: u64, r: u64) -> Result<PropositionCheck> {
    if r == 0 || c_t == 0 || c_s == 0 {
        return Err(Error::config("extents must be positive"));
    }
    let a = c_t as u128 * (c_s as u128 + c_t as u128 + 4);
    let b = 9 * (c_t as u128) * (c_t as u128);
    let c = 2 * c_t as u128;
    let r = r as u128;
    let f_r = 4 * a * r + 4 * b + 4 * c * r * r; // 4 r^2 F(r)
    let f_2r = 2 * a * r + b + 4 * c * r * r; // 4 r^2 F(2r)
    Ok(PropositionCheck {
        left_holds: 2 * f_2r < f_r,
        right_holds: f_r < 4 * f_2r,
        left_condition: 9 * c_t as u128 > 4 * r * r,
    })
}

/// Non-overlapping average pooling of feature maps down to a target spatial
/// size; the identity when sizes already match.
pub fn spatial_align(f: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let [_, _, h, w] = f.dims4()?;
    let (th, tw) = target;
    if (h, w) == (th, tw) {
        return Ok(f.clone());
    }
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 || h < th || w < tw {
        return Err(Error::config(format!(
            "cannot pool {h}x{w} maps to {th}x{tw}: extents must divide evenly"
        )));
    }
    avg_pool(f, h / th, w / tw)
}

/// Pooling windows used by [`spatial_align`] for the given sizes.
pub fn spatial_align_windows(from: (usize, usize), to: (usize, usize)) -> Result<(usize, usize)> {
    let (h, w) = from;
    let (th, tw) = to;
    if h % th != 0 || w % tw != 0 {
        return Err(Error::config(format!(
            "cannot pool {h}x{w} maps to {th}x{tw}: extents must divide evenly"
        )));
    }
    Ok((h / th, w / tw))
}

/// Fold a linear projector `f -> A f + b` into a classifier `(W, b_cls)`:
/// the merged head `(W A, W b + b_cls)` satisfies
/// `W' f + b' == W (A f + b) + b_cls` for every feature vector `f`.
pub fn merge_linear_projector(
    w_t: &Tensor,
    b_t: &Tensor,
    a: &Tensor,
    b: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [k, c_t] = w_t.dims2()?;
    let [ac_t, _c_s] = a.dims2()?;
    if ac_t != c_t {
        return Err(Error::dimension(format!(
            "projector output dim {ac_t} does not match classifier input {c_t}"
        )));
    }
    if b_t.shape() != [k] {
        return Err(Error::dimension(format!(
            "classifier bias shape {:?}, expected [{k}]",
            b_t.shape()
        )));
    }
    if b.shape() != [c_t] {
        return Err(Error::dimension(format!(
            "projector bias shape {:?}, expected [{c_t}]",
            b.shape()
        )));
    }
    let w_merged = matmul(w_t, a)?; // K x C_s
                                    // b' = W b + b_t
    let b_col = b.reshape(&[c_t, 1])?;
    let wb = matmul(w_t, &b_col)?;
    let mut b_merged = Tensor::zeros(&[k]);
    for i in 0..k {
        b_merged.data_mut()[i] = wb.data()[i] + b_t.data()[i];
    }
    Ok((w_merged, b_merged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Mode;

    #[test]
    fn formula_arithmetic_example() {
        // (C_s, C_t, r) = (64, 64, 1): 64*132 + 9*4096 + 128 = 45440.
        assert_eq!(projector_param_formula(64, 64, 1).unwrap(), 45440);
    }

    #[test]
    fn formula_matches_materialized_bottleneck() {
        for (c_s, c_t, r) in [(64, 256, 2), (16, 32, 4), (32, 32, 1), (8, 64, 8)] {
            let spec = ProjectorSpec {
                kind: ProjectorKind::Bottleneck,
                r: r as usize,
                c_s: c_s as usize,
                c_t: c_t as usize,
                spatial_align: false,
            };
            let net = build_projector(
                &spec,
                Shape::Map {
                    c: c_s as usize,
                    h: 2,
                    w: 2,
                },
                &Rng::new(1),
            )
            .unwrap();
            assert_eq!(
                net.param_count(),
                projector_param_formula(c_s, c_t, r).unwrap()
            );
        }
    }

    #[test]
    fn one_conv_count_is_cs_ct_plus_2ct() {
        let spec = ProjectorSpec {
            kind: ProjectorKind::OneConv,
            r: 1,
            c_s: 48,
            c_t: 80,
            spatial_align: false,
        };
        let net = build_projector(&spec, Shape::Map { c: 48, h: 2, w: 2 }, &Rng::new(2)).unwrap();
        assert_eq!(net.param_count(), 48 * 80 + 2 * 80);
    }

    #[test]
    fn bottleneck_shape_contract() {
        let spec = ProjectorSpec {
            kind: ProjectorKind::Bottleneck,
            r: 1,
            c_s: 6,
            c_t: 6,
            spatial_align: false,
        };
        let net = build_projector(&spec, Shape::Map { c: 6, h: 3, w: 3 }, &Rng::new(3)).unwrap();
        assert_eq!(net.output_shape(), Shape::Map { c: 6, h: 3, w: 3 });
        // a forward pass really produces that shape
        let x = Tensor::filled(&[2, 6, 3, 3], 0.5);
        let pass = net.forward(&x, Mode::Train).unwrap();
        assert_eq!(pass.output().shape(), &[2, 6, 3, 3]);
    }

    #[test]
    fn divisibility_violation_rejected() {
        let spec = ProjectorSpec {
            kind: ProjectorKind::Bottleneck,
            r: 3,
            c_s: 8,
            c_t: 16,
            spatial_align: false,
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(projector_param_formula(8, 16, 3).is_err());
    }

    #[test]
    fn proposition_holds_for_typical_dims() {
        // C_t = 128: both inequalities hold for r in {1, 2, 4}.
        for r in [1, 2, 4] {
            let chk = check_proposition(64, 128, r).unwrap();
            assert!(
                chk.left_holds && chk.right_holds && chk.left_condition,
                "r = {r}"
            );
        }
        // spot check with concrete numbers: 2F(4) < F(2) < 4F(4) at C_t = 128
        let f2 = projector_param_formula(64, 128, 2).unwrap();
        let f4 = projector_param_formula(64, 128, 4).unwrap();
        assert!(2 * f4 < f2 && f2 < 4 * f4);
    }

    #[test]
    fn proposition_left_fails_below_threshold() {
        // C_t = 4, r = 8: C_t <= 4 r^2 / 9, so the left inequality fails.
        let chk = check_proposition(4, 4, 8).unwrap();
        assert!(!chk.left_holds);
        assert!(!chk.left_condition);
        assert!(chk.right_holds);
    }

    #[test]
    fn proposition_right_always_holds() {
        for c_s in [1u64, 3, 16, 127] {
            for c_t in [1u64, 2, 9, 64, 333] {
                for r in [1u64, 2, 5, 16, 64] {
                    assert!(check_proposition(c_s, c_t, r).unwrap().right_holds);
                }
            }
        }
    }

    #[test]
    fn formula_strictly_decreases_in_r() {
        let c_s = 32;
        let c_t = 128;
        let mut prev = u64::MAX;
        for r in [1, 2, 4, 8] {
            let f = projector_param_formula(c_s, c_t, r).unwrap();
            assert!(f < prev, "F({r}) = {f} not below {prev}");
            prev = f;
        }
    }

    #[test]
    fn spatial_align_identity_and_block_means() {
        let f = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let same = spatial_align(&f, (4, 4)).unwrap();
        assert_eq!(same, f);
        let pooled = spatial_align(&f, (2, 2)).unwrap();
        assert_eq!(pooled.data(), &[2.5, 4.5, 10.5, 12.5]);
        let constant = Tensor::filled(&[1, 3, 4, 4], 0.77);
        let pooled = spatial_align(&constant, (2, 2)).unwrap();
        assert!(pooled.data().iter().all(|&v| (v - 0.77).abs() < 1e-15));
        assert!(spatial_align(&f, (3, 3)).is_err());
    }

    #[test]
    fn merge_identity_is_noop() {
        let mut rng = Rng::new(4);
        let w = Tensor::uniform(&[5, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[5], -1.0, 1.0, &mut rng);
        let (wm, bm) =
            merge_linear_projector(&w, &b, &Tensor::eye(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(wm, w);
        assert_eq!(bm, b);
    }

    #[test]
    fn merge_bias_path() {
        // f = 0: merged logits == W b + b_cls.
        let mut rng = Rng::new(5);
        let w = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng);
        let b_cls = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
        let a = Tensor::uniform(&[6, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[6], -1.0, 1.0, &mut rng);
        let (wm, bm) = merge_linear_projector(&w, &b_cls, &a, &b).unwrap();
        // f = 0 sends the merged head to its bias, which must be W b + b_cls.
        let f = Tensor::zeros(&[2, 1]);
        let wf = matmul(&wm, &f).unwrap();
        assert!(wf.data().iter().all(|&v| v == 0.0));
        let wb = matmul(&w, &b.reshape(&[6, 1]).unwrap()).unwrap();
        for i in 0..4 {
            assert!((bm.data()[i] - (wb.data()[i] + b_cls.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn merged_equals_two_stage_on_random_features() {
        let mut rng = Rng::new(6);
        let k = 5;
        let c_t = 7;
        let c_s = 3;
        let w = Tensor::uniform(&[k, c_t], -1.0, 1.0, &mut rng);
        let b_cls = Tensor::uniform(&[k], -1.0, 1.0, &mut rng);
        let a = Tensor::uniform(&[c_t, c_s], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[c_t], -1.0, 1.0, &mut rng);
        let (wm, bm) = merge_linear_projector(&w, &b_cls, &a, &b).unwrap();
        for trial in 0..100 {
            let mut r = Rng::new(100 + trial);
            let f = Tensor::uniform(&[c_s, 1], -2.0, 2.0, &mut r);
            // two-stage: W (A f + b) + b_cls
            let af = matmul(&a, &f).unwrap();
            let mut proj = Tensor::zeros(&[c_t, 1]);
            for i in 0..c_t {
                proj.data_mut()[i] = af.data()[i] + b.data()[i];
            }
            let two_stage = matmul(&w, &proj).unwrap();
            let merged = matmul(&wm, &f).unwrap();
            let mut max_diff = 0.0f64;
            let mut argmax_two = 0;
            let mut argmax_merged = 0;
            for i in 0..k {
                let lt = two_stage.data()[i] + b_cls.data()[i];
                let lm = merged.data()[i] + bm.data()[i];
                max_diff = max_diff.max((lt - lm).abs());
                if lt > two_stage.data()[argmax_two] + b_cls.data()[argmax_two] {
                    argmax_two = i;
                }
                if lm > merged.data()[argmax_merged] + bm.data()[argmax_merged] {
                    argmax_merged = i;
                }
            }
            assert!(max_diff < 1e-12, "trial {trial}: diff {max_diff}");
            assert_eq!(argmax_two, argmax_merged);
        }
    }
}
