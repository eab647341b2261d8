//! Layer vocabulary: shape algebra, parameter slots, and the forward/backward
//! math for each layer kind.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    avg_pool, avg_pool_backward, conv2d, conv2d_backward, conv2d_depthwise,
    conv2d_depthwise_backward, Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Vector { c: usize },
    Map { c: usize, h: usize, w: usize },
}

impl Shape {
    pub fn elems(&self) -> usize {
        match *self {
            Shape::Vector { c } => c,
            Shape::Map { c, h, w } => c * h * w,
        }
    }

    /// Tensor shape for a batch of `n` samples.
    pub fn batched(&self, n: usize) -> Vec<usize> {
        match *self {
            Shape::Vector { c } => vec![n, c],
            Shape::Map { c, h, w } => vec![n, c, h, w],
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Shape::Vector { c } => write!(f, "vec({c})"),
            Shape::Map { c, h, w } => write!(f, "map({c}x{h}x{w})"),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        input: usize,
        output: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        #[serde(default)]
        depthwise: bool,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    AvgPool {
        window: usize,
    },
    GlobalAvgPool,
    Flatten,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense {
                input,
                output,
                bias,
            } => {
                write!(
                    f,
                    "dense({input}->{output}{})",
                    if *bias { ", bias" } else { "" }
                )
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                depthwise,
            } => {
                write!(
                    f,
                    "conv{kernel}x{kernel}({in_ch}->{out_ch}{})",
                    if *depthwise { ", dw" } else { "" }
                )
            }
            LayerSpec::BatchNorm { channels } => write!(f, "batch_norm({channels})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::AvgPool { window } => write!(f, "avg_pool({window})"),
            LayerSpec::GlobalAvgPool => write!(f, "global_avg_pool"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

/// How a parameter tensor is initialized at build time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`.
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

/// One named parameter slot of a layer.
#[derive(Debug, Clone)]
pub struct ParamSlot {
    pub slot: &'static str,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl LayerSpec {
    /// Structural validation independent of the surrounding stack.
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { input, output, .. } => {
                if input == 0 || output == 0 {
                    return Err(Error::build(format!("{self}: zero extent")));
                }
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                depthwise,
            } => {
                if kernel != 1 && kernel != 3 {
                    return Err(Error::build(format!("{self}: kernel must be 1 or 3")));
                }
                if in_ch == 0 || out_ch == 0 {
                    return Err(Error::build(format!("{self}: zero channels")));
                }
                if depthwise && in_ch != out_ch {
                    return Err(Error::build(format!(
                        "{self}: depthwise convolution requires in_ch == out_ch"
                    )));
                }
            }
            LayerSpec::BatchNorm { channels } => {
                if channels == 0 {
                    return Err(Error::build(format!("{self}: zero channels")));
                }
            }
            LayerSpec::AvgPool { window } => {
                if window == 0 {
                    return Err(Error::build(format!("{self}: zero window")));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool | LayerSpec::Flatten => {}
        }
        Ok(())
    }

    /// Output shape for the given per-sample input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let err = |msg: String| Err(Error::build(msg));
        match (*self).clone() {
            LayerSpec::Dense {
                input: i,
                output: o,
                ..
            } => match *input {
                Shape::Vector { c } if c == i => Ok(Shape::Vector { c: o }),
                _ => err(format!("{self} expects vec({i}), got {input}")),
            },
            LayerSpec::Conv { in_ch, out_ch, .. } => match *input {
                Shape::Map { c, h, w } if c == in_ch => Ok(Shape::Map { c: out_ch, h, w }),
                _ => err(format!("{self} expects {in_ch}-channel map, got {input}")),
            },
            LayerSpec::BatchNorm { channels } => match *input {
                Shape::Map { c, .. } | Shape::Vector { c } if c == channels => Ok(*input),
                _ => err(format!("{self} expects {channels} channels, got {input}")),
            },
            LayerSpec::Relu => Ok(*input),
            LayerSpec::AvgPool { window } => match *input {
                Shape::Map { c, h, w } if h % window == 0 && w % window == 0 => Ok(Shape::Map {
                    c,
                    h: h / window,
                    w: w / window,
                }),
                _ => err(format!(
                    "{self} needs a map with divisible extents, got {input}"
                )),
            },
            LayerSpec::GlobalAvgPool => match *input {
                Shape::Map { c, .. } => Ok(Shape::Map { c, h: 1, w: 1 }),
                _ => err(format!("{self} expects a map, got {input}")),
            },
            LayerSpec::Flatten => Ok(Shape::Vector { c: input.elems() }),
        }
    }

    /// Trainable parameter count. Batch norm counts its affine pair only;
    /// running statistics are not parameters.
    pub fn param_count(&self) -> u64 {
        match *self {
            LayerSpec::Dense {
                input,
                output,
                bias,
            } => (input * output + if bias { output } else { 0 }) as u64,
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                depthwise,
            } => {
                if depthwise {
                    (out_ch * kernel * kernel) as u64
                } else {
                    (in_ch * out_ch * kernel * kernel) as u64
                }
            }
            LayerSpec::BatchNorm { channels } => (2 * channels) as u64,
            _ => 0,
        }
    }

    pub fn param_slots(&self) -> Vec<ParamSlot> {
        match *self {
            LayerSpec::Dense {
                input,
                output,
                bias,
            } => {
                let mut v = vec![ParamSlot {
                    slot: "weight",
                    shape: vec![output, input],
                    init: Init::KaimingUniform { fan_in: input },
                }];
                if bias {
                    v.push(ParamSlot {
                        slot: "bias",
                        shape: vec![output],
                        init: Init::Zeros,
                    });
                }
                v
            }
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                depthwise,
            } => {
                if depthwise {
                    vec![ParamSlot {
                        slot: "weight",
                        shape: vec![out_ch, kernel, kernel],
                        init: Init::KaimingUniform {
                            fan_in: kernel * kernel,
                        },
                    }]
                } else {
                    vec![ParamSlot {
                        slot: "weight",
                        shape: vec![out_ch, in_ch, kernel, kernel],
                        init: Init::KaimingUniform {
                            fan_in: in_ch * kernel * kernel,
                        },
                    }]
                }
            }
            LayerSpec::BatchNorm { channels } => vec![
                ParamSlot {
                    slot: "gamma",
                    shape: vec![channels],
                    init: Init::Ones,
                },
                ParamSlot {
                    slot: "beta",
                    shape: vec![channels],
                    init: Init::Zeros,
                },
            ],
            _ => Vec::new(),
        }
    }

    /// Running-statistic slots (batch norm only), with their initial values.
    pub fn running_slots(&self) -> Vec<(&'static str, Vec<usize>, f64)> {
        match *self {
            LayerSpec::BatchNorm { channels } => vec![
                ("running_mean", vec![channels], 0.0),
                ("running_var", vec![channels], 1.0),
            ],
            _ => Vec::new(),
        }
    }
}

/// Batch statistics captured by a train-mode batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

// ---------------------------------------------------------------------------
// dense
// ---------------------------------------------------------------------------

/// `y[n,o] = sum_i x[n,i] w[o,i] + b[o]`, accumulating over i ascending.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let [n, c_in] = x.dims2()?;
    let [c_out, wi] = w.dims2()?;
    if wi != c_in {
        return Err(Error::dimension(format!(
            "dense input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, c_out]);
    let xd = x.data();
    let wd = w.data();
    let yd = y.data_mut();
    for s in 0..n {
        let xrow = &xd[s * c_in..(s + 1) * c_in];
        for o in 0..c_out {
            let wrow = &wd[o * c_in..(o + 1) * c_in];
            let mut acc = 0.0;
            for i in 0..c_in {
                acc += xrow[i] * wrow[i];
            }
            yd[s * c_out + o] = acc;
        }
    }
    if let Some(b) = b {
        let bd = b.data();
        for s in 0..n {
            for o in 0..c_out {
                yd[s * c_out + o] += bd[o];
            }
        }
    }
    y.check_finite("dense forward")?;
    Ok(y)
}

/// Returns `(grad_x, grad_w, grad_b)`. `grad_w = grad_y^T . x`.
pub fn dense_backward(
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    want_bias: bool,
) -> Result<(Tensor, Tensor, Option<Tensor>)> {
    let [n, c_in] = x.dims2()?;
    let [c_out, _] = w.dims2()?;
    let mut gx = Tensor::zeros(&[n, c_in]);
    let mut gw = Tensor::zeros(&[c_out, c_in]);
    let xd = x.data();
    let wd = w.data();
    let gyd = gy.data();
    {
        let gxd = gx.data_mut();
        for s in 0..n {
            for o in 0..c_out {
                let g = gyd[s * c_out + o];
                let wrow = &wd[o * c_in..(o + 1) * c_in];
                let gxrow = &mut gxd[s * c_in..(s + 1) * c_in];
                for i in 0..c_in {
                    gxrow[i] += g * wrow[i];
                }
            }
        }
    }
    {
        let gwd = gw.data_mut();
        for s in 0..n {
            let xrow = &xd[s * c_in..(s + 1) * c_in];
            for o in 0..c_out {
                let g = gyd[s * c_out + o];
                let gwrow = &mut gwd[o * c_in..(o + 1) * c_in];
                for i in 0..c_in {
                    gwrow[i] += g * xrow[i];
                }
            }
        }
    }
    let gb = if want_bias {
        let mut gb = Tensor::zeros(&[c_out]);
        let gbd = gb.data_mut();
        for s in 0..n {
            for o in 0..c_out {
                gbd[o] += gyd[s * c_out + o];
            }
        }
        Some(gb)
    } else {
        None
    };
    Ok((gx, gw, gb))
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

/// Channel extent and per-channel element count of a BN input.
fn bn_dims(x: &Tensor) -> Result<(usize, usize, usize)> {
    // returns (batch, channels, spatial)
    match x.shape()[..] {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::dimension(format!(
            "batch norm expects rank 2 or 4, got {:?}",
            x.shape()
        ))),
    }
}

/// Train-mode forward: normalize with biased batch statistics, then apply the
/// affine pair. Returns the normalized output and the batch stats.
pub fn bn_forward_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnStats)> {
    let (n, c, sp) = bn_dims(x)?;
    let m = (n * sp) as f64;
    let xd = x.data();
    let mut mean = Tensor::zeros(&[c]);
    let mut var = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                acc += xd[base + s];
            }
        }
        mean.data_mut()[ch] = acc / m;
    }
    for ch in 0..c {
        let mu = mean.data()[ch];
        let mut acc = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                let d = xd[base + s] - mu;
                acc += d * d;
            }
        }
        var.data_mut()[ch] = acc / m;
    }
    let y = bn_apply(x, &mean, &var, gamma, beta)?;
    Ok((y, BnStats { mean, var }))
}

/// Eval-mode forward: a fixed affine map using running statistics.
pub fn bn_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    bn_apply(x, running_mean, running_var, gamma, beta)
}

fn bn_apply(
    x: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<Tensor> {
    let (n, c, sp) = bn_dims(x)?;
    let mut y = Tensor::zeros(x.shape());
    let xd = x.data();
    let yd = y.data_mut();
    for ch in 0..c {
        let istd = 1.0 / (var.data()[ch] + BN_EPS).sqrt();
        let g = gamma.data()[ch];
        let bt = beta.data()[ch];
        let mu = mean.data()[ch];
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                yd[base + s] = (xd[base + s] - mu) * istd * g + bt;
            }
        }
    }
    y.check_finite("batch norm forward")?;
    Ok(y)
}

/// Train-mode backward through the batch statistics.
/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn bn_backward_train(
    x: &Tensor,
    gamma: &Tensor,
    stats: &BnStats,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, sp) = bn_dims(x)?;
    let m = (n * sp) as f64;
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mu = stats.mean.data()[ch];
        let v = stats.var.data()[ch];
        let istd = 1.0 / (v + BN_EPS).sqrt();
        let g = gamma.data()[ch];

        // First pass: per-channel reductions.
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                let xhat = (xd[base + s] - mu) * istd;
                sum_gy += gyd[base + s];
                sum_gy_xhat += gyd[base + s] * xhat;
            }
        }
        ggamma.data_mut()[ch] = sum_gy_xhat;
        gbeta.data_mut()[ch] = sum_gy;

        // Second pass: dx = (g*istd/m) * (m*gy - sum_gy - xhat*sum_gy_xhat).
        let scale = g * istd / m;
        let gxd = gx.data_mut();
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                let xhat = (xd[base + s] - mu) * istd;
                gxd[base + s] = scale * (m * gyd[base + s] - sum_gy - xhat * sum_gy_xhat);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Eval-mode backward: the running statistics are constants.
pub fn bn_backward_eval(
    x: &Tensor,
    gamma: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    gy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, sp) = bn_dims(x)?;
    let xd = x.data();
    let gyd = gy.data();
    let mut gx = Tensor::zeros(x.shape());
    let mut ggamma = Tensor::zeros(&[c]);
    let mut gbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let istd = 1.0 / (running_var.data()[ch] + BN_EPS).sqrt();
        let mu = running_mean.data()[ch];
        let g = gamma.data()[ch];
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        let gxd = gx.data_mut();
        for b in 0..n {
            let base = (b * c + ch) * sp;
            for s in 0..sp {
                let xhat = (xd[base + s] - mu) * istd;
                sum_gy += gyd[base + s];
                sum_gy_xhat += gyd[base + s] * xhat;
                gxd[base + s] = gyd[base + s] * g * istd;
            }
        }
        ggamma.data_mut()[ch] = sum_gy_xhat;
        gbeta.data_mut()[ch] = sum_gy;
    }
    Ok((gx, ggamma, gbeta))
}

/// Decayed update of running statistics:
/// `running <- momentum * running + (1 - momentum) * batch`.
pub fn bn_update_running(running: &mut Tensor, batch: &Tensor, momentum: f64) {
    for (r, &b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = momentum * *r + (1.0 - momentum) * b;
    }
}

// ---------------------------------------------------------------------------
// parameter-free layers
// ---------------------------------------------------------------------------

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Subgradient 0 at exactly zero.
pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Result<Tensor> {
    x.zip_map(gy, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

pub fn global_avg_pool_forward(x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4()?;
    avg_pool(x, h, w)
}

pub fn global_avg_pool_backward(gy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    avg_pool_backward(gy, h, w)
}

pub fn avg_pool_forward(x: &Tensor, window: usize) -> Result<Tensor> {
    avg_pool(x, window, window)
}

/// Dispatch a conv layer forward.
pub fn conv_forward(spec_depthwise: bool, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    if spec_depthwise {
        conv2d_depthwise(x, weight)
    } else {
        conv2d(x, weight)
    }
}

pub fn conv_backward_dispatch(
    spec_depthwise: bool,
    x: &Tensor,
    weight: &Tensor,
    gy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if spec_depthwise {
        conv2d_depthwise_backward(x, weight, gy)
    } else {
        conv2d_backward(x, weight, gy)
    }
}
