//! Training pipelines: plain cross-entropy training, prediction distillation,
//! classifier-reuse alignment (including tail reuse and joint/sequential
//! variants), multi-teacher training, evaluation, and pruning-ratio
//! accounting.
//!
//! Every pipeline is a pure function of (specs, data, config seed): all
//! randomness flows through labeled child streams of the seed, so re-running
//! with the same inputs reproduces parameters bit for bit.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layer::{dense_forward, LayerSpec, Shape};
use crate::losses::{
    cross_entropy, joint_loss, kd_loss_from_probs, log_softmax_t, one_hot, simkd_loss,
};
use crate::network::{split_reuse, Mode, Model, Net, NetworkSpec, ParamMap};
use crate::optim::{lr_at, sgd_step, SgdState};
use crate::projector::{
    build_projector, merge_linear_projector, spatial_align_windows, ProjectorKind, ProjectorSpec,
};
use crate::rng::Rng;
use crate::tensor::{avg_pool, avg_pool_backward, Tensor};

const EVAL_BATCH: usize = 256;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Baseline,
    Teacher,
    Kd,
    Simkd,
    Joint,
    Sequential,
    SimkdPlus,
    MultiTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTeacherVariant {
    /// Distill from the mean of softened teacher predictions.
    Aveg,
    /// Per-teacher projector with summed alignment losses; inference averages
    /// the reused-classifier logits.
    Simkd,
    /// Per-teacher linear projector on feature vectors, merged into each
    /// teacher classifier; the merged heads are averaged element-wise.
    SimkdV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorSettings {
    #[serde(default = "default_kind")]
    pub kind: ProjectorKind,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_true")]
    pub spatial_align: bool,
}

fn default_kind() -> ProjectorKind {
    ProjectorKind::Bottleneck
}
fn default_r() -> usize {
    2
}
fn default_true() -> bool {
    true
}

impl Default for ProjectorSettings {
    fn default() -> Self {
        ProjectorSettings {
            kind: default_kind(),
            r: default_r(),
            spatial_align: true,
        }
    }
}

impl ProjectorSettings {
    pub fn resolve(&self, c_s: usize, c_t: usize) -> ProjectorSpec {
        ProjectorSpec {
            kind: self.kind,
            r: self.r,
            c_s,
            c_t,
            spatial_align: self.spatial_align,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub method: MethodName,
    /// Joint-training mix: 0 is pure prediction distillation, 1 pure
    /// alignment.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Number of reused teacher blocks for tail-reuse runs.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub variant: Option<MultiTeacherVariant>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_milestones")]
    pub lr_milestones: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default)]
    pub projector: ProjectorSettings,
}

fn default_temperature() -> f64 {
    4.0
}
fn default_epochs() -> usize {
    60
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_milestones() -> Vec<usize> {
    vec![35, 45, 55]
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    5e-4
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr_milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(format!(
                "lr milestones must be strictly increasing: {:?}",
                self.lr_milestones
            )));
        }
        if self.lr_milestones.iter().any(|&m| m >= self.epochs.max(1)) && self.epochs > 0 {
            return Err(Error::config(format!(
                "lr milestones {:?} must lie below the epoch count {}",
                self.lr_milestones, self.epochs
            )));
        }
        if self.epochs == 0 && !self.lr_milestones.is_empty() {
            return Err(Error::config(
                "a zero-epoch run cannot have lr milestones".to_string(),
            ));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive".to_string()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be nonnegative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(
                "weight decay must be nonnegative".to_string(),
            ));
        }
        match self.method {
            MethodName::Joint => {
                let a = self.alpha.ok_or_else(|| {
                    Error::config("joint training requires an alpha value".to_string())
                })?;
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::config(format!("alpha must lie in [0, 1], got {a}")));
                }
            }
            MethodName::SimkdPlus => {
                self.k.ok_or_else(|| {
                    Error::config("tail reuse requires k, the number of reused blocks".to_string())
                })?;
            }
            MethodName::MultiTeacher => {
                self.variant.ok_or_else(|| {
                    Error::config("multi-teacher training requires a variant".to_string())
                })?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Stable method label used in reports and CSV rows.
    pub fn method_label(&self) -> String {
        match self.method {
            MethodName::Baseline => "student".to_string(),
            MethodName::Teacher => "teacher".to_string(),
            MethodName::Kd => "kd".to_string(),
            MethodName::Simkd => "simkd".to_string(),
            MethodName::Joint => "joint".to_string(),
            MethodName::Sequential => "sequential".to_string(),
            MethodName::SimkdPlus => format!("simkd+{}", self.k.unwrap_or(0)),
            MethodName::MultiTeacher => match self.variant {
                Some(MultiTeacherVariant::Aveg) => "aveg".to_string(),
                Some(MultiTeacherVariant::Simkd) => "mt-simkd".to_string(),
                Some(MultiTeacherVariant::SimkdV) => "simkd-v".to_string(),
                None => "multi-teacher".to_string(),
            },
        }
    }
}

// ---------------------------------------------------------------------------
// data plumbing
// ---------------------------------------------------------------------------

/// Train/test split with preprocessing settings.
#[derive(Debug, Clone)]
pub struct SplitData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub norm: Normalization,
    pub augment: AugmentConfig,
}

impl<'a> SplitData<'a> {
    pub fn plain(train: &'a Dataset, test: &'a Dataset) -> Self {
        let (c, _, _) = train.dims();
        SplitData {
            train,
            test,
            norm: Normalization::identity(c),
            augment: AugmentConfig::none(),
        }
    }

    fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::input("empty dataset".to_string()));
        }
        let (c, h, w) = self.train.dims();
        if spec.input != (Shape::Map { c, h, w }) {
            return Err(Error::config(format!(
                "network input {} does not match dataset {c}x{h}x{w}",
                spec.input
            )));
        }
        if self.train.num_classes != spec.num_classes {
            return Err(Error::config(format!(
                "dataset has {} classes, network {}",
                self.train.num_classes, spec.num_classes
            )));
        }
        self.norm.validate(c)?;
        self.augment.validate(h, w)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: f64,
    pub test_nll: f64,
    pub test_l2: Option<f64>,
    /// Reused-teacher-classifier head, where a second head exists (joint).
    pub second_top1: Option<f64>,
    pub second_nll: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub method: String,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub r: Option<usize>,
    pub epochs: Vec<EpochRecord>,
    pub final_train_loss: Option<f64>,
    pub final_top1: f64,
    pub final_nll: f64,
    pub final_l2: Option<f64>,
    pub final_second_top1: Option<f64>,
    pub pruning_ratio: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub top1: f64,
    pub nll: f64,
    pub l2: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
struct EpochEval {
    top1: f64,
    nll: f64,
    l2: Option<f64>,
    second_top1: Option<f64>,
    second_nll: Option<f64>,
}

impl From<EvalMetrics> for EpochEval {
    fn from(m: EvalMetrics) -> Self {
        EpochEval {
            top1: m.top1,
            nll: m.nll,
            l2: m.l2,
            second_top1: None,
            second_nll: None,
        }
    }
}

// ---------------------------------------------------------------------------
// parameter budgets
// ---------------------------------------------------------------------------

/// The five counts entering the pruning-ratio formula. `tc` is the reused
/// teacher part (the classifier alone for plain alignment runs, classifier
/// plus reused blocks for tail reuse).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBudget {
    pub se: u64,
    pub proj: u64,
    pub t: u64,
    pub tc: u64,
    pub sc: u64,
}

impl ParamBudget {
    /// Integer numerator `se + proj + (tc - sc)` of the deployed fraction;
    /// exact, for order comparisons without floating point.
    pub fn deployed_numerator(&self) -> i128 {
        self.se as i128 + self.proj as i128 + self.tc as i128 - self.sc as i128
    }
}

/// `1 - (se + proj + delta) / t` with `delta = tc - sc`. The result can
/// exceed the plain-distillation ratio `1 - se/t` when `proj + delta < 0`.
pub fn pruning_ratio(budget: &ParamBudget) -> Result<f64> {
    if budget.t == 0 {
        return Err(Error::domain(
            "teacher parameter count must be positive".to_string(),
        ));
    }
    if budget.tc > budget.t {
        return Err(Error::config(
            "reused part cannot exceed the whole teacher".to_string(),
        ));
    }
    Ok(1.0 - budget.deployed_numerator() as f64 / budget.t as f64)
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Argmax with ties broken toward the lowest class index.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn eval_indices(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Accumulate top-1 percentage and mean negative log-likelihood over a test
/// set, given a logits function on normalized batches.
fn evaluate_logits_fn(
    data: &Dataset,
    norm: &Normalization,
    mut logits_of: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::input("empty dataset".to_string()));
    }
    let k = data.num_classes;
    let mut correct = 0usize;
    let mut nll_sum = 0.0;
    for idx in eval_indices(data.len()) {
        let (raw, labels) = data.gather(&idx);
        let x = norm.apply(&raw)?;
        let logits = logits_of(&x)?;
        let logp = log_softmax_t(&logits, 1.0)?;
        for (row, &label) in labels.iter().enumerate() {
            let lrow = &logits.data()[row * k..(row + 1) * k];
            if argmax_row(lrow) == label as usize {
                correct += 1;
            }
            nll_sum -= logp.data()[row * k + label as usize];
        }
    }
    let n = data.len() as f64;
    Ok((100.0 * correct as f64 / n, nll_sum / n))
}

/// Evaluate a plain model (its own classifier) in eval mode.
pub fn evaluate_model(model: &Model, data: &Dataset, norm: &Normalization) -> Result<EvalMetrics> {
    let (top1, nll) = evaluate_logits_fn(data, norm, |x| {
        Ok(model.net.forward(x, Mode::Eval)?.output().clone())
    })?;
    Ok(EvalMetrics {
        top1,
        nll,
        l2: None,
    })
}

// ---------------------------------------------------------------------------
// the alignment assembly
// ---------------------------------------------------------------------------

/// Student prefix + projector + frozen teacher tail (reused classifier and,
/// for tail reuse, the last teacher blocks).
#[derive(Debug, Clone)]
pub struct SimkdAssembly {
    pub student: Net,
    pub projector: Net,
    pub projector_spec: ProjectorSpec,
    pub teacher: Model,
    /// Activation index in the teacher encoder where the reused tail begins;
    /// also the alignment-target index.
    pub teacher_cut: usize,
    /// Student activation index feeding the projector (= student net length).
    pub student_cut: usize,
    /// Pool windows applied to the student activation before the projector.
    pub student_pool: Option<(usize, usize)>,
    /// Pool windows applied to the teacher target at loss time.
    pub teacher_pool: Option<(usize, usize)>,
}

pub const STUDENT_PREFIX: &str = "student";

impl SimkdAssembly {
    /// Derive cut points, pools, and the resolved projector spec, then build
    /// student prefix and projector with seeded init.
    pub fn build(
        teacher: &Model,
        student_spec: &NetworkSpec,
        settings: &ProjectorSettings,
        k: usize,
        rng: &Rng,
    ) -> Result<SimkdAssembly> {
        if teacher.spec.num_classes != student_spec.num_classes {
            return Err(Error::config(format!(
                "teacher has {} classes, student {}",
                teacher.spec.num_classes, student_spec.num_classes
            )));
        }
        let vector_kind = matches!(settings.kind, ProjectorKind::LinearVector);
        if vector_kind && k > 0 {
            return Err(Error::config(
                "a linear_vector projector aligns feature vectors and cannot reuse extra blocks"
                    .to_string(),
            ));
        }
        let split = split_reuse(&teacher.spec, student_spec, k)?;
        let (student_cut, teacher_cut) = if k == 0 {
            if vector_kind {
                (student_spec.encoder.len(), teacher.spec.encoder.len())
            } else {
                (student_spec.maps_point(), teacher.spec.maps_point())
            }
        } else {
            (split.student_cut, split.teacher_cut)
        };

        let student_net = Net::build(
            student_spec.encoder[..student_cut].to_vec(),
            student_spec.input,
            STUDENT_PREFIX,
            &rng.child("init.student"),
        )?;
        let s_shape = student_net.output_shape();
        let t_shape = teacher.net.shape_at(teacher_cut);

        let (proj_input, spec, student_pool, teacher_pool) = match (s_shape, t_shape) {
            (Shape::Vector { c: c_s }, Shape::Vector { c: c_t }) => {
                if !vector_kind {
                    return Err(Error::config(
                        "convolutional projector needs feature maps; the alignment point is a vector"
                            .to_string(),
                    ));
                }
                (
                    Shape::Vector { c: c_s },
                    settings.resolve(c_s, c_t),
                    None,
                    None,
                )
            }
            (
                Shape::Map {
                    c: c_s,
                    h: sh,
                    w: sw,
                },
                Shape::Map {
                    c: c_t,
                    h: th,
                    w: tw,
                },
            ) => {
                let mut student_pool = None;
                let mut teacher_pool = None;
                let mut ph = sh;
                let mut pw = sw;
                if (sh, sw) != (th, tw) {
                    if !settings.spatial_align {
                        return Err(Error::config(format!(
                            "feature maps {sh}x{sw} vs {th}x{tw} need spatial alignment, \
                             but it is disabled"
                        )));
                    }
                    if sh >= th && sw >= tw {
                        student_pool = Some(spatial_align_windows((sh, sw), (th, tw))?);
                        ph = th;
                        pw = tw;
                    } else if th >= sh && tw >= sw {
                        teacher_pool = Some(spatial_align_windows((th, tw), (sh, sw))?);
                    } else {
                        return Err(Error::config(format!(
                            "feature maps {sh}x{sw} and {th}x{tw} cannot be aligned by pooling"
                        )));
                    }
                }
                (
                    Shape::Map {
                        c: c_s,
                        h: ph,
                        w: pw,
                    },
                    settings.resolve(c_s, c_t),
                    student_pool,
                    teacher_pool,
                )
            }
            (s, t) => {
                return Err(Error::config(format!(
                    "alignment points disagree in kind: student {s}, teacher {t}"
                )))
            }
        };

        spec.validate()?;
        let projector = build_projector(&spec, proj_input, &rng.child("init.proj"))?;
        let projector_spec = spec;

        let mut teacher = teacher.clone();
        teacher.set_mode(Mode::Eval);
        teacher.freeze_all();

        Ok(SimkdAssembly {
            student: student_net,
            projector,
            projector_spec,
            teacher,
            teacher_cut,
            student_cut,
            student_pool,
            teacher_pool,
        })
    }

    /// Alignment target for a normalized batch: the teacher activation at the
    /// tail input, pooled if configured. Constant with respect to training.
    pub fn teacher_target(&self, x: &Tensor) -> Result<Tensor> {
        let act = self
            .teacher
            .net
            .eval_range(0, self.teacher_cut, x, Mode::Eval)?;
        match self.teacher_pool {
            Some((wh, ww)) => avg_pool(&act, wh, ww),
            None => Ok(act),
        }
    }

    /// Student-side projected activation in the given mode (no cache).
    pub fn projected(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let s_out = self.student.eval_from(0, x, mode)?;
        let pooled = match self.student_pool {
            Some((wh, ww)) => avg_pool(&s_out, wh, ww)?,
            None => s_out,
        };
        self.projector.eval_from(0, &pooled, mode)
    }

    /// Inference logits: projected student activation through the frozen
    /// teacher tail and classifier.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.projected(x, Mode::Eval)?;
        self.teacher.net.eval_from(self.teacher_cut, &p, Mode::Eval)
    }

    /// Features entering the reused classifier (for linear evaluation).
    pub fn classifier_input(&self, x: &Tensor) -> Result<Tensor> {
        let p = self.projected(x, Mode::Eval)?;
        self.teacher
            .net
            .eval_range(self.teacher_cut, self.teacher.encoder_len(), &p, Mode::Eval)
    }

    /// Named tensors of the trainable parts (student prefix + projector).
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.student
            .named_tensors()
            .chain(self.projector.named_tensors())
    }

    /// Restore trainable parts from a checkpoint map.
    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        self.student.load_from(map)?;
        self.projector.load_from(map)?;
        Ok(())
    }

    pub fn budget(&self, student_spec: &NetworkSpec) -> ParamBudget {
        ParamBudget {
            se: self.student.param_count(),
            proj: self.projector.param_count(),
            t: self.teacher.param_count(),
            tc: crate::network::param_count_layers(&self.teacher.spec.encoder[self.teacher_cut..])
                + self.teacher.spec.classifier_param_count(),
            sc: student_spec.classifier_param_count(),
        }
    }
}

/// Evaluate an alignment assembly: reused-classifier accuracy, NLL, and the
/// test alignment loss.
pub fn evaluate_simkd(
    assembly: &SimkdAssembly,
    data: &Dataset,
    norm: &Normalization,
) -> Result<EvalMetrics> {
    let mut l2_sum = 0.0;
    let (top1, nll) = evaluate_logits_fn(data, norm, |x| {
        let target = assembly.teacher_target(x)?;
        let projected = assembly.projected(x, Mode::Eval)?;
        let loss = simkd_loss(&target, &projected)?;
        l2_sum += loss.value * x.shape()[0] as f64;
        assembly
            .teacher
            .net
            .eval_from(assembly.teacher_cut, &projected, Mode::Eval)
    })?;
    Ok(EvalMetrics {
        top1,
        nll,
        l2: Some(l2_sum / data.len() as f64),
    })
}

// ---------------------------------------------------------------------------
// the training driver
// ---------------------------------------------------------------------------

trait TrainLoop {
    /// One optimizer step on a normalized batch; returns the batch loss.
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64>;
    /// End-of-epoch test evaluation.
    fn eval(&mut self) -> Result<EpochEval>;
}

/// Shared epoch driver. Shuffling and augmentation draw from children of the
/// pipeline stream labeled per epoch, so every pipeline sees the same batch
/// sequence for the same seed regardless of what it trains.
fn drive(
    cfg: &DistillConfig,
    root: &Rng,
    data: &SplitData,
    train_loop: &mut dyn TrainLoop,
) -> Result<Vec<EpochRecord>> {
    let n = data.train.len();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch, cfg.lr, &cfg.lr_milestones);
        let mut order: Vec<usize> = (0..n).collect();
        root.child(&format!("shuffle.e{epoch}")).shuffle(&mut order);
        let mut aug_rng = root.child(&format!("augment.e{epoch}"));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (raw, labels) = data.train.gather(chunk);
            let augmented = augment(&raw, &data.augment, &mut aug_rng)?;
            let x = data.norm.apply(&augmented)?;
            let loss = train_loop.step(&x, &labels, lr)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "training diverged at epoch {epoch}"
                )));
            }
            loss_sum += loss * labels.len() as f64;
        }
        let eval = train_loop.eval()?;
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            test_top1: eval.top1,
            test_nll: eval.nll,
            test_l2: eval.l2,
            second_top1: eval.second_top1,
            second_nll: eval.second_nll,
        });
    }
    Ok(records)
}

fn finish_report(
    cfg: &DistillConfig,
    records: Vec<EpochRecord>,
    initial: impl FnOnce() -> Result<EpochEval>,
    r: Option<usize>,
    pruning: Option<f64>,
) -> Result<TrainReport> {
    let (final_train_loss, fin) = match records.last() {
        Some(rec) => (
            Some(rec.train_loss),
            EpochEval {
                top1: rec.test_top1,
                nll: rec.test_nll,
                l2: rec.test_l2,
                second_top1: rec.second_top1,
                second_nll: rec.second_nll,
            },
        ),
        None => (None, initial()?),
    };
    Ok(TrainReport {
        method: cfg.method_label(),
        seed: cfg.seed,
        alpha: cfg.alpha.filter(|_| cfg.method == MethodName::Joint),
        r,
        epochs: records,
        final_train_loss,
        final_top1: fin.top1,
        final_nll: fin.nll,
        final_l2: fin.l2,
        final_second_top1: fin.second_top1,
        pruning_ratio: pruning,
    })
}

// ---------------------------------------------------------------------------
// pipeline: plain cross-entropy training (baseline student / teacher)
// ---------------------------------------------------------------------------

struct CeLoop<'a> {
    model: Model,
    state: SgdState,
    data: &'a SplitData<'a>,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for CeLoop<'_> {
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64> {
        let y = one_hot(labels, self.model.spec.num_classes)?;
        let pass = self.model.forward(x)?;
        let loss = cross_entropy(self.model.logits(&pass), &y)?;
        let grads = self.model.backward_from_logits(&pass, loss.grad)?;
        self.model.net.commit_bn(&pass)?;
        sgd_step(
            self.model.net.params_mut(),
            &grads,
            &mut self.state,
            &BTreeSet::new(),
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        Ok(loss.value)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        Ok(evaluate_model(&self.model, self.data.test, &self.data.norm)?.into())
    }
}

/// Cross-entropy training from seeded initialization (the baseline student
/// and teacher rows).
pub fn train_model(
    spec: &NetworkSpec,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    data.validate(spec)?;
    let root = Rng::new(cfg.seed);
    let model = Model::build(spec, &root.child("init.student"))?;
    let mut lp = CeLoop {
        model,
        state: SgdState::new(),
        data,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let records = drive(cfg, &root, data, &mut lp)?;
    let CeLoop { mut model, .. } = lp;
    model.set_mode(Mode::Eval);
    let report = finish_report(
        cfg,
        records,
        || Ok(evaluate_model(&model, data.test, &data.norm)?.into()),
        None,
        None,
    )?;
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// pipeline: prediction distillation
// ---------------------------------------------------------------------------

struct KdLoop<'a> {
    teacher: Model,
    student: Model,
    state: SgdState,
    data: &'a SplitData<'a>,
    temperature: f64,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for KdLoop<'_> {
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64> {
        let y = one_hot(labels, self.student.spec.num_classes)?;
        let t_pass = self.teacher.forward(x)?;
        let s_pass = self.student.forward(x)?;
        let p_teacher = crate::losses::softmax_t(self.teacher.logits(&t_pass), self.temperature)?;
        let loss = kd_loss_from_probs(
            self.student.logits(&s_pass),
            &p_teacher,
            &y,
            self.temperature,
        )?;
        let grads = self.student.backward_from_logits(&s_pass, loss.grad)?;
        self.student.net.commit_bn(&s_pass)?;
        sgd_step(
            self.student.net.params_mut(),
            &grads,
            &mut self.state,
            &BTreeSet::new(),
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        Ok(loss.value)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        Ok(evaluate_model(&self.student, self.data.test, &self.data.norm)?.into())
    }
}

/// Distill teacher predictions into a freshly initialized student.
pub fn distill_kd(
    teacher: &Model,
    student_spec: &NetworkSpec,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(Model, TrainReport)> {
    let root = Rng::new(cfg.seed);
    let student = Model::build(student_spec, &root.child("init.student"))?;
    distill_kd_from(teacher, student, data, cfg)
}

/// Same, but starting from a caller-provided student (warm starts).
pub fn distill_kd_from(
    teacher: &Model,
    student: Model,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    data.validate(&student.spec)?;
    if teacher.spec.num_classes != student.spec.num_classes {
        return Err(Error::config(format!(
            "teacher has {} classes, student {}",
            teacher.spec.num_classes, student.spec.num_classes
        )));
    }
    let root = Rng::new(cfg.seed);
    let mut teacher = teacher.clone();
    teacher.set_mode(Mode::Eval);
    teacher.freeze_all();
    let t = teacher.param_count();
    let se = student.spec.encoder_param_count();
    let sc = student.spec.classifier_param_count();
    let ratio = pruning_ratio(&ParamBudget {
        se,
        proj: 0,
        t,
        tc: sc,
        sc,
    })?;
    let mut lp = KdLoop {
        teacher,
        student,
        state: SgdState::new(),
        data,
        temperature: cfg.temperature,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let records = drive(cfg, &root, data, &mut lp)?;
    let KdLoop { mut student, .. } = lp;
    student.set_mode(Mode::Eval);
    let report = finish_report(
        cfg,
        records,
        || Ok(evaluate_model(&student, data.test, &data.norm)?.into()),
        None,
        Some(ratio),
    )?;
    Ok((student, report))
}

// ---------------------------------------------------------------------------
// pipeline: feature alignment with classifier reuse (plain and tail reuse)
// ---------------------------------------------------------------------------

struct SimkdLoop<'a> {
    assembly: SimkdAssembly,
    student_state: SgdState,
    proj_state: SgdState,
    data: &'a SplitData<'a>,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for SimkdLoop<'_> {
    fn step(&mut self, x: &Tensor, _labels: &[u8], lr: f64) -> Result<f64> {
        // No label ever enters this loss path.
        let a = &mut self.assembly;
        let target = a.teacher_target(x)?;
        let s_pass = a.student.forward(x, Mode::Train)?;
        let s_act = s_pass.output().clone();
        let pooled = match a.student_pool {
            Some((wh, ww)) => avg_pool(&s_act, wh, ww)?,
            None => s_act,
        };
        let p_pass = a.projector.forward(&pooled, Mode::Train)?;
        let loss = simkd_loss(&target, p_pass.output())?;
        let empty = BTreeSet::new();
        let (p_grads, g_proj_in) =
            a.projector
                .backward(&p_pass, &[(a.projector.layers().len(), loss.grad)], &empty)?;
        let g_student = match a.student_pool {
            Some((wh, ww)) => avg_pool_backward(&g_proj_in, wh, ww)?,
            None => g_proj_in,
        };
        let (s_grads, _) =
            a.student
                .backward(&s_pass, &[(a.student.layers().len(), g_student)], &empty)?;
        a.student.commit_bn(&s_pass)?;
        a.projector.commit_bn(&p_pass)?;
        sgd_step(
            a.student.params_mut(),
            &s_grads,
            &mut self.student_state,
            &empty,
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        sgd_step(
            a.projector.params_mut(),
            &p_grads,
            &mut self.proj_state,
            &empty,
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        Ok(loss.value)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        Ok(evaluate_simkd(&self.assembly, self.data.test, &self.data.norm)?.into())
    }
}

/// Feature-alignment distillation with the reused teacher classifier
/// (`k = 0`) or tail (`k > 0` reused blocks). Only the student prefix and the
/// projector receive gradients; labels never enter the loss.
pub fn distill_simkd(
    teacher: &Model,
    student_spec: &NetworkSpec,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(SimkdAssembly, TrainReport)> {
    cfg.validate()?;
    data.validate(student_spec)?;
    let k = match cfg.method {
        MethodName::SimkdPlus => cfg.k.unwrap_or(0),
        _ => 0,
    };
    let root = Rng::new(cfg.seed);
    let assembly = SimkdAssembly::build(teacher, student_spec, &cfg.projector, k, &root)?;
    let budget = assembly.budget(student_spec);
    let ratio = pruning_ratio(&budget)?;
    let mut lp = SimkdLoop {
        assembly,
        student_state: SgdState::new(),
        proj_state: SgdState::new(),
        data,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let records = drive(cfg, &root, data, &mut lp)?;
    let SimkdLoop { assembly, .. } = lp;
    let report = finish_report(
        cfg,
        records,
        || Ok(evaluate_simkd(&assembly, data.test, &data.norm)?.into()),
        Some(cfg.projector.r),
        Some(ratio),
    )?;
    Ok((assembly, report))
}

// ---------------------------------------------------------------------------
// pipeline: joint training
// ---------------------------------------------------------------------------

/// Joint-training outcome: the student model (own classifier) plus, when
/// `alpha > 0`, the projector and cut metadata for the reused-teacher head.
pub struct JointOutcome {
    pub student: Model,
    pub projector: Option<Net>,
    pub projector_spec: Option<ProjectorSpec>,
    pub teacher: Model,
    pub teacher_cut: usize,
    pub student_align: usize,
    pub student_pool: Option<(usize, usize)>,
    pub teacher_pool: Option<(usize, usize)>,
}

impl JointOutcome {
    /// Reused-teacher-classifier logits for a normalized batch.
    pub fn teacher_head_logits(&self, x: &Tensor) -> Result<Tensor> {
        let proj = self
            .projector
            .as_ref()
            .ok_or_else(|| Error::usage("no projector was trained (alpha = 0)".to_string()))?;
        let act = self
            .student
            .net
            .eval_range(0, self.student_align, x, Mode::Eval)?;
        let pooled = match self.student_pool {
            Some((wh, ww)) => avg_pool(&act, wh, ww)?,
            None => act,
        };
        let p = proj.eval_from(0, &pooled, Mode::Eval)?;
        self.teacher.net.eval_from(self.teacher_cut, &p, Mode::Eval)
    }
}

struct JointLoop<'a> {
    out: JointOutcome,
    alpha: f64,
    temperature: f64,
    student_state: SgdState,
    proj_state: SgdState,
    data: &'a SplitData<'a>,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for JointLoop<'_> {
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64> {
        let y = one_hot(labels, self.out.student.spec.num_classes)?;
        let t_pass = self.out.teacher.forward(x)?;
        let s_pass = self.out.student.forward(x)?;
        let p_teacher =
            crate::losses::softmax_t(self.out.teacher.logits(&t_pass), self.temperature)?;
        let kd = kd_loss_from_probs(
            self.out.student.logits(&s_pass),
            &p_teacher,
            &y,
            self.temperature,
        )?;

        let empty = BTreeSet::new();
        let logits_idx = self.out.student.encoder_len() + 1;

        if let Some(proj) = self.out.projector.as_mut() {
            let s_act = s_pass.acts[self.out.student_align].clone();
            let pooled = match self.out.student_pool {
                Some((wh, ww)) => avg_pool(&s_act, wh, ww)?,
                None => s_act,
            };
            let p_pass = proj.forward(&pooled, Mode::Train)?;
            let mut target = t_pass.acts[self.out.teacher_cut].clone();
            if let Some((wh, ww)) = self.out.teacher_pool {
                target = avg_pool(&target, wh, ww)?;
            }
            let align = simkd_loss(&target, p_pass.output())?;
            let joint = joint_loss(self.alpha, &kd, &align)?;

            let mut seeds = Vec::new();
            if self.alpha < 1.0 {
                seeds.push((logits_idx, joint.grad_logits.clone()));
            }
            let (p_grads, g_proj_in) = proj.backward(
                &p_pass,
                &[(proj.layers().len(), joint.grad_features)],
                &empty,
            )?;
            let g_align = match self.out.student_pool {
                Some((wh, ww)) => avg_pool_backward(&g_proj_in, wh, ww)?,
                None => g_proj_in,
            };
            seeds.push((self.out.student_align, g_align));
            let (s_grads, _) = self.out.student.net.backward(&s_pass, &seeds, &empty)?;
            self.out.student.net.commit_bn(&s_pass)?;
            proj.commit_bn(&p_pass)?;
            sgd_step(
                self.out.student.net.params_mut(),
                &s_grads,
                &mut self.student_state,
                &empty,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
            sgd_step(
                proj.params_mut(),
                &p_grads,
                &mut self.proj_state,
                &empty,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
            Ok(joint.value)
        } else {
            // alpha = 0: exactly the prediction-distillation path.
            let grads = self.out.student.backward_from_logits(&s_pass, kd.grad)?;
            self.out.student.net.commit_bn(&s_pass)?;
            sgd_step(
                self.out.student.net.params_mut(),
                &grads,
                &mut self.student_state,
                &empty,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
            Ok(kd.value)
        }
    }

    fn eval(&mut self) -> Result<EpochEval> {
        let own = evaluate_model(&self.out.student, self.data.test, &self.data.norm)?;
        if self.out.projector.is_none() {
            return Ok(own.into());
        }
        let mut l2_sum = 0.0;
        let (second_top1, second_nll) = evaluate_logits_fn(self.data.test, &self.data.norm, |x| {
            let act = self
                .out
                .student
                .net
                .eval_range(0, self.out.student_align, x, Mode::Eval)?;
            let pooled = match self.out.student_pool {
                Some((wh, ww)) => avg_pool(&act, wh, ww)?,
                None => act,
            };
            let p = self
                .out
                .projector
                .as_ref()
                .unwrap()
                .eval_from(0, &pooled, Mode::Eval)?;
            let mut target =
                self.out
                    .teacher
                    .net
                    .eval_range(0, self.out.teacher_cut, x, Mode::Eval)?;
            if let Some((wh, ww)) = self.out.teacher_pool {
                target = avg_pool(&target, wh, ww)?;
            }
            l2_sum += simkd_loss(&target, &p)?.value * x.shape()[0] as f64;
            self.out
                .teacher
                .net
                .eval_from(self.out.teacher_cut, &p, Mode::Eval)
        })?;
        Ok(EpochEval {
            top1: own.top1,
            nll: own.nll,
            l2: Some(l2_sum / self.data.test.len() as f64),
            second_top1: Some(second_top1),
            second_nll: Some(second_nll),
        })
    }
}

/// Train encoder, student classifier, and projector under the convex
/// combination of the two losses. Reports both heads per epoch.
pub fn distill_joint(
    teacher: &Model,
    student_spec: &NetworkSpec,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(JointOutcome, TrainReport)> {
    cfg.validate()?;
    data.validate(student_spec)?;
    let alpha = cfg
        .alpha
        .ok_or_else(|| Error::config("joint training requires alpha".to_string()))?;
    if teacher.spec.num_classes != student_spec.num_classes {
        return Err(Error::config(format!(
            "teacher has {} classes, student {}",
            teacher.spec.num_classes, student_spec.num_classes
        )));
    }
    let root = Rng::new(cfg.seed);
    let student = Model::build(student_spec, &root.child("init.student"))?;
    let mut teacher_frozen = teacher.clone();
    teacher_frozen.set_mode(Mode::Eval);
    teacher_frozen.freeze_all();

    let (projector, projector_spec, student_align, teacher_cut, student_pool, teacher_pool) =
        if alpha > 0.0 {
            // Reuse the assembly construction to derive cuts and pools.
            let skeleton = SimkdAssembly::build(teacher, student_spec, &cfg.projector, 0, &root)?;
            (
                Some(skeleton.projector),
                Some(skeleton.projector_spec),
                skeleton.student_cut,
                skeleton.teacher_cut,
                skeleton.student_pool,
                skeleton.teacher_pool,
            )
        } else {
            (
                None,
                None,
                student_spec.maps_point(),
                teacher.spec.maps_point(),
                None,
                None,
            )
        };

    let out = JointOutcome {
        student,
        projector,
        projector_spec,
        teacher: teacher_frozen,
        teacher_cut,
        student_align,
        student_pool,
        teacher_pool,
    };
    let mut lp = JointLoop {
        out,
        alpha,
        temperature: cfg.temperature,
        student_state: SgdState::new(),
        proj_state: SgdState::new(),
        data,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let records = drive(cfg, &root, data, &mut lp)?;
    let initial = if records.is_empty() {
        Some(lp.eval()?)
    } else {
        None
    };
    let JointLoop { mut out, .. } = lp;
    out.student.set_mode(Mode::Eval);
    let report = finish_report(
        cfg,
        records,
        || Ok(initial.expect("computed for zero-epoch runs")),
        Some(cfg.projector.r),
        None,
    )?;
    Ok((out, report))
}

// ---------------------------------------------------------------------------
// pipeline: sequential training (linear evaluation)
// ---------------------------------------------------------------------------

struct LinearLoop<'a> {
    assembly: &'a SimkdAssembly,
    head: Net,
    state: SgdState,
    data: &'a SplitData<'a>,
    num_classes: usize,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for LinearLoop<'_> {
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64> {
        let y = one_hot(labels, self.num_classes)?;
        // Frozen feature path in eval mode: the encoder is fixed.
        let feats = self.assembly.classifier_input(x)?;
        let pass = self.head.forward(&feats, Mode::Train)?;
        let loss = cross_entropy(pass.output(), &y)?;
        let empty = BTreeSet::new();
        let (grads, _) = self.head.backward(&pass, &[(1, loss.grad)], &empty)?;
        sgd_step(
            self.head.params_mut(),
            &grads,
            &mut self.state,
            &empty,
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        Ok(loss.value)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        let (top1, nll) = evaluate_logits_fn(self.data.test, &self.data.norm, |x| {
            let feats = self.assembly.classifier_input(x)?;
            self.head.eval_from(0, &feats, Mode::Eval)
        })?;
        Ok(EpochEval {
            top1,
            nll,
            l2: None,
            second_top1: None,
            second_nll: None,
        })
    }
}

/// Linear evaluation: train a fresh dense classifier on the frozen projected
/// features of an aligned assembly. Nothing in the assembly changes.
pub fn sequential_linear_eval(
    assembly: &SimkdAssembly,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(Net, TrainReport)> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    // the head always sees the reused-classifier input width
    let feature_dim = assembly.teacher.spec.feature_dim;
    let num_classes = assembly.teacher.spec.num_classes;
    let head = Net::build(
        vec![LayerSpec::Dense {
            input: feature_dim,
            output: num_classes,
            bias: true,
        }],
        Shape::Vector { c: feature_dim },
        "linear",
        &root.child("init.linear"),
    )?;
    let budget = ParamBudget {
        se: assembly.student.param_count(),
        proj: assembly.projector.param_count(),
        t: assembly.teacher.param_count(),
        tc: head.param_count(),
        sc: head.param_count(),
    };
    let ratio = pruning_ratio(&budget)?;
    let mut lp = LinearLoop {
        assembly,
        head,
        state: SgdState::new(),
        data,
        num_classes,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let records = drive(cfg, &root, data, &mut lp)?;
    let initial = if records.is_empty() {
        Some(lp.eval()?)
    } else {
        None
    };
    let LinearLoop { head, .. } = lp;
    let report = finish_report(
        cfg,
        records,
        || Ok(initial.expect("computed for zero-epoch runs")),
        Some(cfg.projector.r),
        Some(ratio),
    )?;
    Ok((head, report))
}

// ---------------------------------------------------------------------------
// pipeline: multi-teacher
// ---------------------------------------------------------------------------

/// Multi-teacher artifacts by variant.
pub enum MultiOutcome {
    /// Prediction averaging trains an ordinary student model.
    Student(Model),
    /// Per-teacher assemblies sharing one student prefix.
    Assemblies(MultiSimkd),
    /// Averaged merged classifier on top of the full student encoder.
    Merged(MergedAssembly),
}

/// Shared student prefix plus one projector/teacher pair per teacher.
pub struct MultiSimkd {
    pub student: Net,
    pub members: Vec<MtMember>,
}

pub struct MtMember {
    pub projector: Net,
    pub projector_spec: ProjectorSpec,
    pub teacher: Model,
    pub teacher_cut: usize,
    pub student_pool: Option<(usize, usize)>,
    pub teacher_pool: Option<(usize, usize)>,
}

impl MultiSimkd {
    /// Mean of the per-teacher reused-classifier logits.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s_out = self.student.eval_from(0, x, Mode::Eval)?;
        let mut sum: Option<Tensor> = None;
        for m in &self.members {
            let pooled = match m.student_pool {
                Some((wh, ww)) => avg_pool(&s_out, wh, ww)?,
                None => s_out.clone(),
            };
            let p = m.projector.eval_from(0, &pooled, Mode::Eval)?;
            let logits = m.teacher.net.eval_from(m.teacher_cut, &p, Mode::Eval)?;
            sum = Some(match sum {
                Some(acc) => acc.add(&logits)?,
                None => logits,
            });
        }
        Ok(sum
            .expect("at least one member")
            .scale(1.0 / self.members.len() as f64))
    }
}

/// Student encoder with an element-wise averaged merged classifier; adds no
/// inference parameters beyond a plain student.
pub struct MergedAssembly {
    pub encoder: Net,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl MergedAssembly {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.encoder.eval_from(0, x, Mode::Eval)?;
        dense_forward(&f, &self.weight, Some(&self.bias))
    }

    pub fn param_count(&self) -> u64 {
        self.encoder.param_count() + (self.weight.len() + self.bias.len()) as u64
    }
}

pub fn evaluate_multi(m: &MultiSimkd, data: &Dataset, norm: &Normalization) -> Result<EvalMetrics> {
    let (top1, nll) = evaluate_logits_fn(data, norm, |x| m.infer(x))?;
    Ok(EvalMetrics {
        top1,
        nll,
        l2: None,
    })
}

pub fn evaluate_merged(
    m: &MergedAssembly,
    data: &Dataset,
    norm: &Normalization,
) -> Result<EvalMetrics> {
    let (top1, nll) = evaluate_logits_fn(data, norm, |x| m.infer(x))?;
    Ok(EvalMetrics {
        top1,
        nll,
        l2: None,
    })
}

struct AvegLoop<'a> {
    teachers: Vec<Model>,
    student: Model,
    state: SgdState,
    data: &'a SplitData<'a>,
    temperature: f64,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for AvegLoop<'_> {
    fn step(&mut self, x: &Tensor, labels: &[u8], lr: f64) -> Result<f64> {
        let y = one_hot(labels, self.student.spec.num_classes)?;
        let mut mean: Option<Tensor> = None;
        for t in &self.teachers {
            let pass = t.forward(x)?;
            let p = crate::losses::softmax_t(t.logits(&pass), self.temperature)?;
            mean = Some(match mean {
                Some(acc) => acc.add(&p)?,
                None => p,
            });
        }
        let mean = mean
            .expect("at least one teacher")
            .scale(1.0 / self.teachers.len() as f64);
        let s_pass = self.student.forward(x)?;
        let loss = kd_loss_from_probs(self.student.logits(&s_pass), &mean, &y, self.temperature)?;
        let grads = self.student.backward_from_logits(&s_pass, loss.grad)?;
        self.student.net.commit_bn(&s_pass)?;
        sgd_step(
            self.student.net.params_mut(),
            &grads,
            &mut self.state,
            &BTreeSet::new(),
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        Ok(loss.value)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        Ok(evaluate_model(&self.student, self.data.test, &self.data.norm)?.into())
    }
}

struct MtSimkdLoop<'a> {
    multi: MultiSimkd,
    student_state: SgdState,
    proj_states: Vec<SgdState>,
    data: &'a SplitData<'a>,
    momentum: f64,
    weight_decay: f64,
}

impl TrainLoop for MtSimkdLoop<'_> {
    fn step(&mut self, x: &Tensor, _labels: &[u8], lr: f64) -> Result<f64> {
        let empty = BTreeSet::new();
        let s_pass = self.multi.student.forward(x, Mode::Train)?;
        let s_act = s_pass.output().clone();
        let mut total_loss = 0.0;
        let mut g_sum: Option<Tensor> = None;
        let mut member_grads = Vec::new();
        for m in self.multi.members.iter_mut() {
            let pooled = match m.student_pool {
                Some((wh, ww)) => avg_pool(&s_act, wh, ww)?,
                None => s_act.clone(),
            };
            let p_pass = m.projector.forward(&pooled, Mode::Train)?;
            let mut target = m.teacher.net.eval_range(0, m.teacher_cut, x, Mode::Eval)?;
            if let Some((wh, ww)) = m.teacher_pool {
                target = avg_pool(&target, wh, ww)?;
            }
            let loss = simkd_loss(&target, p_pass.output())?;
            total_loss += loss.value;
            let (p_grads, g_in) = m.projector.backward(
                &p_pass,
                &[(m.projector.layers().len(), loss.grad)],
                &empty,
            )?;
            let g_at_act = match m.student_pool {
                Some((wh, ww)) => avg_pool_backward(&g_in, wh, ww)?,
                None => g_in,
            };
            g_sum = Some(match g_sum {
                Some(acc) => acc.add(&g_at_act)?,
                None => g_at_act,
            });
            m.projector.commit_bn(&p_pass)?;
            member_grads.push(p_grads);
        }
        let g_sum = g_sum.expect("at least one member");
        let (s_grads, _) = self.multi.student.backward(
            &s_pass,
            &[(self.multi.student.layers().len(), g_sum)],
            &empty,
        )?;
        self.multi.student.commit_bn(&s_pass)?;
        sgd_step(
            self.multi.student.params_mut(),
            &s_grads,
            &mut self.student_state,
            &empty,
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        for (m, (grads, state)) in self
            .multi
            .members
            .iter_mut()
            .zip(member_grads.into_iter().zip(self.proj_states.iter_mut()))
        {
            sgd_step(
                m.projector.params_mut(),
                &grads,
                state,
                &empty,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
        }
        Ok(total_loss)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        Ok(evaluate_multi(&self.multi, self.data.test, &self.data.norm)?.into())
    }
}

struct MtVectorLoop<'a> {
    student: Net,
    members: Vec<MtMember>, // linear projectors; teacher_cut = encoder length
    student_state: SgdState,
    proj_states: Vec<SgdState>,
    data: &'a SplitData<'a>,
    momentum: f64,
    weight_decay: f64,
}

impl MtVectorLoop<'_> {
    fn merged_head(&self) -> Result<(Tensor, Tensor)> {
        let mut w_sum: Option<Tensor> = None;
        let mut b_sum: Option<Tensor> = None;
        for m in &self.members {
            let prefix = m.projector.prefix();
            let a = m
                .projector
                .params()
                .get(&format!("{prefix}.0.weight"))
                .expect("dense projector");
            let b = m
                .projector
                .params()
                .get(&format!("{prefix}.0.bias"))
                .expect("dense projector");
            let (wm, bm) = merge_linear_projector(
                m.teacher.classifier_weight(),
                m.teacher.classifier_bias(),
                a,
                b,
            )?;
            w_sum = Some(match w_sum {
                Some(acc) => acc.add(&wm)?,
                None => wm,
            });
            b_sum = Some(match b_sum {
                Some(acc) => acc.add(&bm)?,
                None => bm,
            });
        }
        let n = self.members.len() as f64;
        Ok((
            w_sum.expect("members").scale(1.0 / n),
            b_sum.expect("members").scale(1.0 / n),
        ))
    }
}

impl TrainLoop for MtVectorLoop<'_> {
    fn step(&mut self, x: &Tensor, _labels: &[u8], lr: f64) -> Result<f64> {
        let empty = BTreeSet::new();
        let s_pass = self.student.forward(x, Mode::Train)?;
        let f_s = s_pass.output().clone();
        let mut total = 0.0;
        let mut g_sum: Option<Tensor> = None;
        let mut member_grads = Vec::new();
        for m in self.members.iter_mut() {
            let t_feats = m.teacher.net.eval_range(0, m.teacher_cut, x, Mode::Eval)?;
            let p_pass = m.projector.forward(&f_s, Mode::Train)?;
            let loss = simkd_loss(&t_feats, p_pass.output())?;
            total += loss.value;
            let (p_grads, g_in) = m.projector.backward(&p_pass, &[(1, loss.grad)], &empty)?;
            g_sum = Some(match g_sum {
                Some(acc) => acc.add(&g_in)?,
                None => g_in,
            });
            member_grads.push(p_grads);
        }
        let (s_grads, _) = self.student.backward(
            &s_pass,
            &[(self.student.layers().len(), g_sum.expect("members"))],
            &empty,
        )?;
        self.student.commit_bn(&s_pass)?;
        sgd_step(
            self.student.params_mut(),
            &s_grads,
            &mut self.student_state,
            &empty,
            lr,
            self.momentum,
            self.weight_decay,
        )?;
        for (m, (grads, state)) in self
            .members
            .iter_mut()
            .zip(member_grads.into_iter().zip(self.proj_states.iter_mut()))
        {
            sgd_step(
                m.projector.params_mut(),
                &grads,
                state,
                &empty,
                lr,
                self.momentum,
                self.weight_decay,
            )?;
        }
        Ok(total)
    }

    fn eval(&mut self) -> Result<EpochEval> {
        let (w, b) = self.merged_head()?;
        let (top1, nll) = evaluate_logits_fn(self.data.test, &self.data.norm, |x| {
            let f = self.student.eval_from(0, x, Mode::Eval)?;
            dense_forward(&f, &w, Some(&b))
        })?;
        Ok(EpochEval {
            top1,
            nll,
            l2: None,
            second_top1: None,
            second_nll: None,
        })
    }
}

/// Multi-teacher distillation. All teachers must share the class count and at
/// least two are required.
pub fn multi_teacher(
    teachers: &[Model],
    student_spec: &NetworkSpec,
    data: &SplitData,
    cfg: &DistillConfig,
) -> Result<(MultiOutcome, TrainReport)> {
    cfg.validate()?;
    data.validate(student_spec)?;
    if teachers.len() < 2 {
        return Err(Error::config(format!(
            "multi-teacher training needs at least two teachers, got {}",
            teachers.len()
        )));
    }
    if teachers
        .iter()
        .any(|t| t.spec.num_classes != student_spec.num_classes)
    {
        return Err(Error::config(
            "teachers and student must share the class count".to_string(),
        ));
    }
    let variant = cfg
        .variant
        .ok_or_else(|| Error::config("multi-teacher training requires a variant".to_string()))?;
    let root = Rng::new(cfg.seed);
    let frozen_teachers: Vec<Model> = teachers
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_mode(Mode::Eval);
            t.freeze_all();
            t
        })
        .collect();

    match variant {
        MultiTeacherVariant::Aveg => {
            let student = Model::build(student_spec, &root.child("init.student"))?;
            let mut lp = AvegLoop {
                teachers: frozen_teachers,
                student,
                state: SgdState::new(),
                data,
                temperature: cfg.temperature,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let records = drive(cfg, &root, data, &mut lp)?;
            let AvegLoop { mut student, .. } = lp;
            student.set_mode(Mode::Eval);
            let report = finish_report(
                cfg,
                records,
                || Ok(evaluate_model(&student, data.test, &data.norm)?.into()),
                None,
                None,
            )?;
            Ok((MultiOutcome::Student(student), report))
        }
        MultiTeacherVariant::Simkd => {
            let student_cut = student_spec.maps_point();
            let student = Net::build(
                student_spec.encoder[..student_cut].to_vec(),
                student_spec.input,
                STUDENT_PREFIX,
                &root.child("init.student"),
            )?;
            let s_shape = student.output_shape();
            let mut members = Vec::new();
            for (i, t) in frozen_teachers.iter().enumerate() {
                let m = build_member(t, s_shape, &cfg.projector, &root, i)?;
                members.push(m);
            }
            let n_members = members.len();
            let mut lp = MtSimkdLoop {
                multi: MultiSimkd { student, members },
                student_state: SgdState::new(),
                proj_states: vec![SgdState::new(); n_members],
                data,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let records = drive(cfg, &root, data, &mut lp)?;
            let MtSimkdLoop { multi, .. } = lp;
            let report = finish_report(
                cfg,
                records,
                || Ok(evaluate_multi(&multi, data.test, &data.norm)?.into()),
                Some(cfg.projector.r),
                None,
            )?;
            Ok((MultiOutcome::Assemblies(multi), report))
        }
        MultiTeacherVariant::SimkdV => {
            let student = Net::build(
                student_spec.encoder.clone(),
                student_spec.input,
                STUDENT_PREFIX,
                &root.child("init.student"),
            )?;
            let c_s = student_spec.feature_dim;
            let mut members = Vec::new();
            for (i, t) in frozen_teachers.iter().enumerate() {
                let c_t = t.spec.feature_dim;
                let spec = ProjectorSpec {
                    kind: ProjectorKind::LinearVector,
                    r: cfg.projector.r,
                    c_s,
                    c_t,
                    spatial_align: false,
                };
                let projector = Net::build(
                    spec.layers()?,
                    Shape::Vector { c: c_s },
                    &format!("projv{i}"),
                    &root.child(&format!("init.projv.{i}")),
                )?;
                members.push(MtMember {
                    projector,
                    projector_spec: spec,
                    teacher: t.clone(),
                    teacher_cut: t.encoder_len(),
                    student_pool: None,
                    teacher_pool: None,
                });
            }
            let n_members = members.len();
            let mut lp = MtVectorLoop {
                student,
                members,
                student_state: SgdState::new(),
                proj_states: vec![SgdState::new(); n_members],
                data,
                momentum: cfg.momentum,
                weight_decay: cfg.weight_decay,
            };
            let records = drive(cfg, &root, data, &mut lp)?;
            let initial = if records.is_empty() {
                Some(lp.eval()?)
            } else {
                None
            };
            let (w, b) = lp.merged_head()?;
            let MtVectorLoop { student, .. } = lp;
            let merged = MergedAssembly {
                encoder: student,
                weight: w,
                bias: b,
            };
            let report = finish_report(
                cfg,
                records,
                || Ok(initial.expect("computed for zero-epoch runs")),
                None,
                None,
            )?;
            Ok((MultiOutcome::Merged(merged), report))
        }
    }
}

pub(crate) fn build_member(
    teacher: &Model,
    s_shape: Shape,
    settings: &ProjectorSettings,
    root: &Rng,
    index: usize,
) -> Result<MtMember> {
    let teacher_cut = teacher.spec.maps_point();
    let t_shape = teacher.net.shape_at(teacher_cut);
    let (c_s, sh, sw) = match s_shape {
        Shape::Map { c, h, w } => (c, h, w),
        Shape::Vector { .. } => {
            return Err(Error::config(
                "multi-teacher alignment variant needs map features; use the merged variant \
                 for vector features"
                    .to_string(),
            ))
        }
    };
    let (c_t, th, tw) = match t_shape {
        Shape::Map { c, h, w } => (c, h, w),
        Shape::Vector { .. } => {
            return Err(Error::config(
                "teacher has no feature maps to align to".to_string(),
            ))
        }
    };
    let mut student_pool = None;
    let mut teacher_pool = None;
    let (mut ph, mut pw) = (sh, sw);
    if (sh, sw) != (th, tw) {
        if !settings.spatial_align {
            return Err(Error::config(
                "spatial alignment disabled but map sizes differ".to_string(),
            ));
        }
        if sh >= th && sw >= tw {
            student_pool = Some(spatial_align_windows((sh, sw), (th, tw))?);
            ph = th;
            pw = tw;
        } else {
            teacher_pool = Some(spatial_align_windows((th, tw), (sh, sw))?);
        }
    }
    let spec = settings.resolve(c_s, c_t);
    spec.validate()?;
    let prefix = format!("proj{index}");
    let projector = Net::build(
        spec.layers()?,
        Shape::Map {
            c: c_s,
            h: ph,
            w: pw,
        },
        &prefix,
        &root.child(&format!("init.proj.{index}")),
    )?;
    Ok(MtMember {
        projector,
        projector_spec: spec,
        teacher: teacher.clone(),
        teacher_cut,
        student_pool,
        teacher_pool,
    })
}
