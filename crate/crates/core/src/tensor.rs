//! Dense row-major f64 tensors with fixed reduction orders.
//!
//! Everything trains and evaluates in 64-bit; summations always run in
//! ascending index order so results are bit-identical across runs and
//! platforms. Operations that can overflow on finite inputs (matrix products,
//! convolutions) validate their outputs and report a numeric error instead of
//! propagating NaN/Inf silently.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build from shape + flat data; checks extent product and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(
                "non-finite entry in tensor data".to_string(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Row-major 2-D identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Fill from a seeded stream, uniform on `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Fill with standard-normal draws.
    pub fn normal(shape: &[usize], rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Same data, new shape (extent product must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dimension(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// Sum of all entries in ascending index order.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Euclidean norm, fixed order.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::numeric(format!(
                "non-finite value produced by {context}"
            )))
        }
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<Tensor> {
        let [r, c] = self.dims2()?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [a, b] => Ok([a, b]),
            _ => Err(Error::dimension(format!(
                "expected rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(Error::dimension(format!(
                "expected rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Matrix product `a (M x K) * b (K x N)`, accumulating over k in ascending
/// order for every output entry.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [m, ka] = a.dims2()?;
    let [kb, n] = b.dims2()?;
    if ka != kb {
        return Err(Error::dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut od[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &bd[k * n..(k + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out.check_finite("matmul")?;
    Ok(out)
}

/// Same-size 2-D cross-correlation with zero padding `(k-1)/2`, stride 1,
/// no bias. Input `N x C_in x H x W`, kernel `C_out x C_in x k x k`.
/// Accumulation runs over (ci, u, v) in ascending order.
pub fn conv2d(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, c_in, h, w] = input.dims4()?;
    let [c_out, kc_in, kh, kw] = kernel.dims4()?;
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::dimension(format!(
            "kernel must be 1x1 or 3x3, got {kh}x{kw}"
        )));
    }
    if kc_in != c_in {
        return Err(Error::dimension(format!(
            "conv2d channel mismatch: input has {c_in} channels, kernel expects {kc_in}"
        )));
    }
    let k = kh;
    let pad = (k - 1) / 2;
    let mut out = Tensor::zeros(&[n, c_out, h, w]);
    let id = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for b in 0..n {
        for co in 0..c_out {
            let obase = ((b * c_out) + co) * h * w;
            for ci in 0..c_in {
                let ibase = ((b * c_in) + ci) * h * w;
                let kbase = ((co * c_in) + ci) * k * k;
                for u in 0..k {
                    for v in 0..k {
                        let kv = kd[kbase + u * k + v];
                        // input row offset for output row y is y + u - pad
                        for y in 0..h {
                            let iy = y + u;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let orow = obase + y * w;
                            let irow = ibase + iy * w;
                            for x in 0..w {
                                let ix = x + v;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                od[orow + x] += kv * id[irow + (ix - pad)];
                            }
                        }
                    }
                }
            }
        }
    }
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, c_in, h, w] = input.dims4()?;
    let [c_out, _, k, _] = kernel.dims4()?;
    let [gn, gc, gh, gw] = grad_out.dims4()?;
    if (gn, gc, gh, gw) != (n, c_out, h, w) {
        return Err(Error::dimension(format!(
            "conv2d grad shape {:?} does not match output {:?}",
            grad_out.shape(),
            [n, c_out, h, w]
        )));
    }
    let pad = (k - 1) / 2;
    let mut gi = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let id = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let gid = gi.data_mut();
    let gkd = gk.data_mut();
    for b in 0..n {
        for co in 0..c_out {
            let gbase = ((b * c_out) + co) * h * w;
            for ci in 0..c_in {
                let ibase = ((b * c_in) + ci) * h * w;
                let kbase = ((co * c_in) + ci) * k * k;
                for u in 0..k {
                    for v in 0..k {
                        let kidx = kbase + u * k + v;
                        let kv = kd[kidx];
                        let mut kacc = 0.0;
                        for y in 0..h {
                            let iy = y + u;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            let iy = iy - pad;
                            let grow = gbase + y * w;
                            let irow = ibase + iy * w;
                            for x in 0..w {
                                let ix = x + v;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let g = gd[grow + x];
                                kacc += g * id[irow + (ix - pad)];
                                gid[irow + (ix - pad)] += g * kv;
                            }
                        }
                        gkd[kidx] += kacc;
                    }
                }
            }
        }
    }
    gi.check_finite("conv2d backward (input grad)")?;
    gk.check_finite("conv2d backward (kernel grad)")?;
    Ok((gi, gk))
}

/// Depthwise same-size cross-correlation: each channel is filtered by its own
/// `k x k` kernel. Input `N x C x H x W`, kernel `C x k x k`.
pub fn conv2d_depthwise(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (kc, k) = match kernel.shape()[..] {
        [kc, kh, kw] if kh == kw => (kc, kh),
        _ => {
            return Err(Error::dimension(format!(
                "depthwise kernel must be C x k x k, got {:?}",
                kernel.shape()
            )))
        }
    };
    if kc != c {
        return Err(Error::dimension(format!(
            "depthwise channel mismatch: input has {c}, kernel has {kc}"
        )));
    }
    let pad = (k - 1) / 2;
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let id = input.data();
    let kd = kernel.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c) + ch) * h * w;
            let kbase = ch * k * k;
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let iy = y + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for v in 0..k {
                            let ix = x + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            acc += kd[kbase + u * k + v] * id[base + iy * w + (ix - pad)];
                        }
                    }
                    od[base + y * w + x] = acc;
                }
            }
        }
    }
    out.check_finite("conv2d_depthwise")?;
    Ok(out)
}

/// Gradients of [`conv2d_depthwise`].
pub fn conv2d_depthwise_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = input.dims4()?;
    let k = kernel.shape()[1];
    if grad_out.shape() != input.shape() {
        return Err(Error::dimension(format!(
            "depthwise grad shape {:?} does not match {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let pad = (k - 1) / 2;
    let mut gi = Tensor::zeros(input.shape());
    let mut gk = Tensor::zeros(kernel.shape());
    let id = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let gid = gi.data_mut();
    let gkd = gk.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let base = ((b * c) + ch) * h * w;
            let kbase = ch * k * k;
            for y in 0..h {
                for x in 0..w {
                    let g = gd[base + y * w + x];
                    for u in 0..k {
                        let iy = y + u;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for v in 0..k {
                            let ix = x + v;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            let iidx = base + iy * w + (ix - pad);
                            gkd[kbase + u * k + v] += g * id[iidx];
                            gid[iidx] += g * kd[kbase + u * k + v];
                        }
                    }
                }
            }
        }
    }
    Ok((gi, gk))
}

/// Non-overlapping average pooling with independent window extents.
/// `N x C x H x W -> N x C x H/wh x W/ww`; extents must divide evenly.
pub fn avg_pool(input: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
        return Err(Error::config(format!(
            "pool window {wh}x{ww} does not divide spatial size {h}x{w}"
        )));
    }
    let oh = h / wh;
    let ow = w / ww;
    let inv = 1.0 / (wh * ww) as f64;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let id = input.data();
    let od = out.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let ibase = ((b * c) + ch) * h * w;
            let obase = ((b * c) + ch) * oh * ow;
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = 0.0;
                    for u in 0..wh {
                        let row = ibase + (y * wh + u) * w + x * ww;
                        for v in 0..ww {
                            acc += id[row + v];
                        }
                    }
                    od[obase + y * ow + x] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`avg_pool`]: spread each upstream entry uniformly over its window.
pub fn avg_pool_backward(grad_out: &Tensor, wh: usize, ww: usize) -> Result<Tensor> {
    let [n, c, oh, ow] = grad_out.dims4()?;
    let h = oh * wh;
    let w = ow * ww;
    let inv = 1.0 / (wh * ww) as f64;
    let mut gi = Tensor::zeros(&[n, c, h, w]);
    let gd = grad_out.data();
    let gid = gi.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let obase = ((b * c) + ch) * oh * ow;
            let ibase = ((b * c) + ch) * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let g = gd[obase + y * ow + x] * inv;
                    for u in 0..wh {
                        let row = ibase + (y * wh + u) * w + x * ww;
                        for v in 0..ww {
                            gid[row + v] += g;
                        }
                    }
                }
            }
        }
    }
    Ok(gi)
}
