//! Loss functions with analytic gradients: temperature softmax, cross
//! entropy, the two-term distillation loss, the feature-alignment l2 loss and
//! its output-side / combined placements, plus the convex joint combination.
//!
//! Batch reduction is the mean everywhere, so hyper-parameters are independent
//! of batch size. Teacher outputs are constants by contract: no gradient is
//! ever produced for them.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// A scalar loss with the gradient of its differentiated argument.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad: Tensor,
}

/// Joint loss carries two gradient routes: one into the logits, one into the
/// projected features.
#[derive(Debug, Clone)]
pub struct JointLossValue {
    pub value: f64,
    pub grad_logits: Tensor,
    pub grad_features: Tensor,
    pub kd_value: f64,
    pub align_value: f64,
}

/// Row-wise softened softmax: `exp((g - max)/T)` normalized per row.
pub fn softmax_t(logits: &Tensor, t: f64) -> Result<Tensor> {
    if t.is_nan() || t <= 0.0 || !t.is_finite() {
        return Err(Error::domain(format!(
            "softmax temperature must be positive, got {t}"
        )));
    }
    let [n, k] = logits.dims2()?;
    let mut out = Tensor::zeros(&[n, k]);
    let ld = logits.data();
    let od = out.data_mut();
    for s in 0..n {
        let row = &ld[s * k..(s + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for j in 0..k {
            let e = ((row[j] - max) / t).exp();
            od[s * k + j] = e;
            z += e;
        }
        for j in 0..k {
            od[s * k + j] /= z;
        }
    }
    out.check_finite("softmax")?;
    Ok(out)
}

/// Row-wise log-softmax at temperature `t`; numerically safe for the KL term.
pub(crate) fn log_softmax_t(logits: &Tensor, t: f64) -> Result<Tensor> {
    let [n, k] = logits.dims2()?;
    let mut out = Tensor::zeros(&[n, k]);
    let ld = logits.data();
    let od = out.data_mut();
    for s in 0..n {
        let row = &ld[s * k..(s + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for j in 0..k {
            z += ((row[j] - max) / t).exp();
        }
        let lz = z.ln();
        for j in 0..k {
            od[s * k + j] = (row[j] - max) / t - lz;
        }
    }
    out.check_finite("log-softmax")?;
    Ok(out)
}

fn check_one_hot(labels: &Tensor) -> Result<()> {
    let [n, k] = labels.dims2()?;
    for s in 0..n {
        let row = &labels.data()[s * k..(s + 1) * k];
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != k - 1 {
            return Err(Error::input(format!("label row {s} is not one-hot")));
        }
    }
    Ok(())
}

/// Mean cross entropy against one-hot labels at `T = 1`.
/// Gradient with respect to logits: `(p - y) / N`.
pub fn cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<LossValue> {
    let [n, k] = logits.dims2()?;
    if labels.shape() != logits.shape() {
        return Err(Error::dimension(format!(
            "labels {:?} do not match logits {:?}",
            labels.shape(),
            logits.shape()
        )));
    }
    check_one_hot(labels)?;
    let logp = log_softmax_t(logits, 1.0)?;
    let p = logp.map(f64::exp);
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    for i in 0..n * k {
        value -= labels.data()[i] * logp.data()[i];
    }
    value *= inv_n;
    let grad = p.zip_map(labels, |pv, yv| (pv - yv) * inv_n)?;
    Ok(LossValue { value, grad })
}

/// Two-term distillation loss:
/// cross entropy at `T = 1` plus `T^2 * KL(p_teacher_T || p_student_T)`,
/// each averaged over the batch. The gradient with respect to the student
/// logits is `(p1 - y)/N + T (pT_s - pT_t)/N`; teacher logits are constants.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &Tensor,
    t: f64,
) -> Result<LossValue> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::dimension(format!(
            "teacher logits {:?} do not match student logits {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    let p_teacher = softmax_t(teacher_logits, t)?;
    kd_loss_from_probs(student_logits, &p_teacher, labels, t)
}

/// Distillation loss against an explicit softened teacher distribution
/// (used directly by prediction-averaging multi-teacher training).
pub fn kd_loss_from_probs(
    student_logits: &Tensor,
    teacher_probs_t: &Tensor,
    labels: &Tensor,
    t: f64,
) -> Result<LossValue> {
    let [n, k] = student_logits.dims2()?;
    if teacher_probs_t.shape() != student_logits.shape() {
        return Err(Error::dimension(format!(
            "teacher distribution {:?} does not match student logits {:?}",
            teacher_probs_t.shape(),
            student_logits.shape()
        )));
    }
    let ce = cross_entropy(student_logits, labels)?;
    let logp_s = log_softmax_t(student_logits, t)?;
    let p_s = logp_s.map(f64::exp);
    let inv_n = 1.0 / n as f64;

    // KL(p_t || p_s) summed per row, averaged over the batch; terms with
    // p_t == 0 contribute zero by the usual convention.
    let mut kl = 0.0;
    for s in 0..n {
        for j in 0..k {
            let pt = teacher_probs_t.data()[s * k + j];
            if pt > 0.0 {
                kl += pt * (pt.ln() - logp_s.data()[s * k + j]);
            }
        }
    }
    kl *= inv_n;
    let value = ce.value + t * t * kl;
    if !value.is_finite() {
        return Err(Error::numeric("non-finite distillation loss".to_string()));
    }
    // d/ds of T^2 * KL is T * (p_s - p_t), then batch-averaged.
    let mut grad = ce.grad;
    for i in 0..n * k {
        grad.data_mut()[i] += t * (p_s.data()[i] - teacher_probs_t.data()[i]) * inv_n;
    }
    Ok(LossValue { value, grad })
}

/// Feature-alignment loss: squared l2 distance summed over all feature
/// dimensions, averaged over the batch. Gradient on the projected student
/// features: `-2 (f_t - f_s) / N`. The teacher features are constants.
pub fn simkd_loss(f_t: &Tensor, f_s_proj: &Tensor) -> Result<LossValue> {
    if f_t.shape() != f_s_proj.shape() {
        return Err(Error::dimension(format!(
            "teacher features {:?} do not match projected student features {:?}",
            f_t.shape(),
            f_s_proj.shape()
        )));
    }
    let n = f_t.shape()[0] as f64;
    let inv_n = 1.0 / n;
    let mut value = 0.0;
    for (a, b) in f_t.data().iter().zip(f_s_proj.data()) {
        let d = a - b;
        value += d * d;
    }
    value *= inv_n;
    if !value.is_finite() {
        return Err(Error::numeric("non-finite alignment loss".to_string()));
    }
    let grad = f_t.zip_map(f_s_proj, |a, b| -2.0 * (a - b) * inv_n)?;
    Ok(LossValue { value, grad })
}

/// Convex combination `(1 - alpha) * kd + alpha * align`, with each gradient
/// route scaled by its coefficient.
pub fn joint_loss(alpha: f64, kd: &LossValue, align: &LossValue) -> Result<JointLossValue> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(JointLossValue {
        value: (1.0 - alpha) * kd.value + alpha * align.value,
        grad_logits: kd.grad.scale(1.0 - alpha),
        grad_features: align.grad.scale(alpha),
        kd_value: kd.value,
        align_value: align.value,
    })
}

/// Alignment measured after the reused classifier weight:
/// `||W f_t - W f_s||^2` per sample, averaged over the batch.
/// Gradient on the student features: `-2 W^T W (f_t - f_s) / N`.
/// `W` (the teacher classifier weight, `K x C`) is a constant.
pub fn output_l2_loss(w_t: &Tensor, f_t: &Tensor, f_s: &Tensor) -> Result<LossValue> {
    let [_, c] = w_t.dims2()?;
    let [n, cf] = f_t.dims2()?;
    if f_s.shape() != f_t.shape() {
        return Err(Error::dimension(format!(
            "feature shapes differ: {:?} vs {:?}",
            f_t.shape(),
            f_s.shape()
        )));
    }
    if cf != c {
        return Err(Error::dimension(format!(
            "features have {cf} dims but the classifier expects {c}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let diff = f_t.sub(f_s)?; // N x C
    let wt_t = w_t.transpose2()?; // C x K
    let wdiff = matmul(&diff, &wt_t)?; // N x K, rows are W (f_t - f_s)
    let mut value = 0.0;
    for v in wdiff.data() {
        value += v * v;
    }
    value *= inv_n;
    // grad = -2 W^T (W diff) / N, computed per sample.
    let back = matmul(&wdiff, w_t)?; // N x C, rows are W^T W diff
    let grad = back.scale(-2.0 * inv_n);
    Ok(LossValue { value, grad })
}

/// Input-side plus output-side alignment. Gradient on the student features:
/// `-2 (I + W^T W)(f_t - f_s) / N`.
pub fn combined_l2_loss(w_t: &Tensor, f_t: &Tensor, f_s: &Tensor) -> Result<LossValue> {
    let input = simkd_loss(f_t, f_s)?;
    let output = output_l2_loss(w_t, f_t, f_s)?;
    Ok(LossValue {
        value: input.value + output.value,
        grad: input.grad.add(&output.grad)?,
    })
}

/// One-hot encode integer labels.
pub fn one_hot(labels: &[u8], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, &l) in labels.iter().enumerate() {
        if (l as usize) >= num_classes {
            return Err(Error::input(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        t.data_mut()[i * num_classes + l as usize] = 1.0;
    }
    Ok(t)
}
