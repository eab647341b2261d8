//! Networks as layer stacks: building, forward/backward, parameter counting,
//! and the encoder/classifier split with reusable teacher tails.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{
    avg_pool_forward, bn_backward_eval, bn_backward_train, bn_forward_eval, bn_forward_train,
    bn_update_running, conv_backward_dispatch, conv_forward, dense_backward, dense_forward,
    global_avg_pool_backward, global_avg_pool_forward, relu_backward, relu_forward, BnStats, Init,
    LayerSpec, Shape, BN_MOMENTUM,
};
use crate::rng::Rng;
use crate::tensor::{avg_pool_backward, Tensor};

pub type ParamMap = BTreeMap<String, Tensor>;
pub type GradMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Walk a layer list from `input`, returning every intermediate shape
/// (`shapes[0] == input`, one entry per layer after that). Errors name the
/// offending layer and its predecessor.
pub fn shape_chain(layers: &[LayerSpec], input: &Shape) -> Result<Vec<Shape>> {
    let mut shapes = vec![*input];
    for (i, layer) in layers.iter().enumerate() {
        layer.validate()?;
        let cur = shapes[i];
        let next = layer.output_shape(&cur).map_err(|e| {
            let prev = if i == 0 {
                "network input".to_string()
            } else {
                format!("layer {} ({})", i - 1, layers[i - 1])
            };
            Error::build(format!("layer {i} ({layer}) incompatible with {prev}: {e}"))
        })?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Trainable-parameter count of a layer list.
pub fn param_count_layers(layers: &[LayerSpec]) -> u64 {
    layers.iter().map(|l| l.param_count()).sum()
}

// ---------------------------------------------------------------------------
// Net: a materialized layer stack
// ---------------------------------------------------------------------------

/// A layer stack with named parameters (`{prefix}.{i}.{slot}`) and batch-norm
/// running statistics. Parameters only change through [`Net::params_mut`],
/// which invalidates outstanding forward passes.
#[derive(Debug, Clone)]
pub struct Net {
    layers: Vec<LayerSpec>,
    input: Shape,
    prefix: String,
    params: ParamMap,
    running: ParamMap,
    version: u64,
}

/// Cached activations of one forward call. `acts[0]` is the input batch and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Pass {
    pub acts: Vec<Tensor>,
    bn: Vec<Option<BnStats>>,
    mode: Mode,
    version: u64,
}

impl Pass {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("pass holds at least the input")
    }
}

impl Net {
    /// Materialize a stack: Kaiming-uniform weights (fan-in), zero biases,
    /// batch-norm affine (1, 0) with running statistics (0, 1).
    pub fn build(layers: Vec<LayerSpec>, input: Shape, prefix: &str, rng: &Rng) -> Result<Net> {
        shape_chain(&layers, &input)?;
        let mut params = ParamMap::new();
        let mut running = ParamMap::new();
        for (i, layer) in layers.iter().enumerate() {
            for slot in layer.param_slots() {
                let name = format!("{prefix}.{i}.{}", slot.slot);
                let tensor = match slot.init {
                    Init::KaimingUniform { fan_in } => {
                        let bound = (6.0 / fan_in as f64).sqrt();
                        let mut r = rng.child(&name);
                        Tensor::uniform(&slot.shape, -bound, bound, &mut r)
                    }
                    Init::Zeros => Tensor::zeros(&slot.shape),
                    Init::Ones => Tensor::filled(&slot.shape, 1.0),
                };
                params.insert(name, tensor);
            }
            for (slot, shape, value) in layer.running_slots() {
                running.insert(
                    format!("{prefix}.{i}.{slot}"),
                    Tensor::filled(&shape, value),
                );
            }
        }
        Ok(Net {
            layers,
            input,
            prefix: prefix.to_string(),
            params,
            running,
            version: 0,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn output_shape(&self) -> Shape {
        // build() proved the chain, so this cannot fail
        let mut s = self.input;
        for l in &self.layers {
            s = l.output_shape(&s).expect("validated at build time");
        }
        s
    }

    pub fn shape_at(&self, act_index: usize) -> Shape {
        let mut s = self.input;
        for l in &self.layers[..act_index] {
            s = l.output_shape(&s).expect("validated at build time");
        }
        s
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn running(&self) -> &ParamMap {
        &self.running
    }

    /// Mutable parameter access; bumps the version so stale passes are caught.
    pub fn params_mut(&mut self) -> &mut ParamMap {
        self.version += 1;
        &mut self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> u64 {
        param_count_layers(&self.layers)
    }

    /// Element count of the actually-allocated trainable tensors (running
    /// statistics excluded). Agrees with [`Net::param_count`] by construction;
    /// counting the materialized tensors keeps formula checks honest.
    pub fn materialized_param_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    fn param(&self, i: usize, slot: &str) -> &Tensor {
        self.params
            .get(&format!("{}.{i}.{slot}", self.prefix))
            .expect("parameter slots are created at build time")
    }

    fn running_stat(&self, i: usize, slot: &str) -> &Tensor {
        self.running
            .get(&format!("{}.{i}.{slot}", self.prefix))
            .expect("running slots are created at build time")
    }

    /// Forward the whole stack, caching activations for backward.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Pass> {
        let expect = self.input.batched(x.shape()[0]);
        if x.shape() != expect {
            return Err(Error::dimension(format!(
                "input shape {:?} does not match network input {} (expected {:?})",
                x.shape(),
                self.input,
                expect
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut bn = Vec::with_capacity(self.layers.len());
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = &acts[i];
            let (out, stats) = self.layer_forward(i, layer, cur, mode)?;
            acts.push(out);
            bn.push(stats);
        }
        Ok(Pass {
            acts,
            bn,
            mode,
            version: self.version,
        })
    }

    /// Run only `layers[start..]` and return the final output (no cache).
    /// Used for frozen teacher tails.
    pub fn eval_from(&self, start: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.eval_range(start, self.layers.len(), x, mode)
    }

    /// Run `layers[start..end]` without caching.
    pub fn eval_range(&self, start: usize, end: usize, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for (off, layer) in self.layers[start..end].iter().enumerate() {
            let (out, _) = self.layer_forward(start + off, layer, &cur, mode)?;
            cur = out;
        }
        Ok(cur)
    }

    fn layer_forward(
        &self,
        i: usize,
        layer: &LayerSpec,
        x: &Tensor,
        mode: Mode,
    ) -> Result<(Tensor, Option<BnStats>)> {
        match layer {
            LayerSpec::Dense { bias, .. } => {
                let w = self.param(i, "weight");
                let b = if *bias {
                    Some(self.param(i, "bias"))
                } else {
                    None
                };
                Ok((dense_forward(x, w, b)?, None))
            }
            LayerSpec::Conv { depthwise, .. } => {
                Ok((conv_forward(*depthwise, x, self.param(i, "weight"))?, None))
            }
            LayerSpec::BatchNorm { .. } => {
                let gamma = self.param(i, "gamma");
                let beta = self.param(i, "beta");
                match mode {
                    Mode::Train => {
                        let (y, stats) = bn_forward_train(x, gamma, beta)?;
                        Ok((y, Some(stats)))
                    }
                    Mode::Eval => {
                        let y = bn_forward_eval(
                            x,
                            gamma,
                            beta,
                            self.running_stat(i, "running_mean"),
                            self.running_stat(i, "running_var"),
                        )?;
                        Ok((y, None))
                    }
                }
            }
            LayerSpec::Relu => Ok((relu_forward(x), None)),
            LayerSpec::AvgPool { window } => Ok((avg_pool_forward(x, *window)?, None)),
            LayerSpec::GlobalAvgPool => Ok((global_avg_pool_forward(x)?, None)),
            LayerSpec::Flatten => {
                let n = x.shape()[0];
                let c: usize = x.shape()[1..].iter().product();
                Ok((x.reshape(&[n, c])?, None))
            }
        }
    }

    /// Backpropagate one or more gradient seeds. Each seed `(act_index, grad)`
    /// injects a gradient with respect to `acts[act_index]`. Returns the
    /// parameter gradients (frozen names omitted) and the gradient with
    /// respect to the stack input.
    pub fn backward(
        &self,
        pass: &Pass,
        seeds: &[(usize, Tensor)],
        frozen: &BTreeSet<String>,
    ) -> Result<(GradMap, Tensor)> {
        if pass.version != self.version {
            return Err(Error::usage(
                "stale forward cache: parameters changed since this pass was computed".to_string(),
            ));
        }
        if seeds.is_empty() {
            return Err(Error::usage(
                "backward needs at least one gradient seed".to_string(),
            ));
        }
        for (idx, g) in seeds {
            if *idx >= pass.acts.len() {
                return Err(Error::usage(format!(
                    "gradient seed at activation {idx}, but pass has {}",
                    pass.acts.len()
                )));
            }
            if g.shape() != pass.acts[*idx].shape() {
                return Err(Error::dimension(format!(
                    "gradient seed shape {:?} does not match activation {:?}",
                    g.shape(),
                    pass.acts[*idx].shape()
                )));
            }
        }
        let top = seeds.iter().map(|(i, _)| *i).max().unwrap();
        let mut cur = Tensor::zeros(pass.acts[top].shape());
        for (idx, g) in seeds.iter().filter(|(i, _)| *i == top) {
            debug_assert_eq!(*idx, top);
            cur = cur.add(g)?;
        }
        let mut grads = GradMap::new();
        let record = |name: String, tensor: Tensor, grads: &mut GradMap| {
            if !frozen.contains(&name) {
                match grads.entry(name) {
                    std::collections::btree_map::Entry::Vacant(e) => {
                        e.insert(tensor);
                    }
                    std::collections::btree_map::Entry::Occupied(mut e) => {
                        let merged = e.get().add(&tensor).expect("gradient shapes agree");
                        e.insert(merged);
                    }
                }
            }
        };
        let mut act_idx = top;
        while act_idx > 0 {
            let li = act_idx - 1;
            let layer = &self.layers[li];
            let x = &pass.acts[li];
            let gin = match layer {
                LayerSpec::Dense { bias, .. } => {
                    let w = self.param(li, "weight");
                    let (gx, gw, gb) = dense_backward(x, w, &cur, *bias)?;
                    record(format!("{}.{li}.weight", self.prefix), gw, &mut grads);
                    if let Some(gb) = gb {
                        record(format!("{}.{li}.bias", self.prefix), gb, &mut grads);
                    }
                    gx
                }
                LayerSpec::Conv { depthwise, .. } => {
                    let w = self.param(li, "weight");
                    let (gx, gw) = conv_backward_dispatch(*depthwise, x, w, &cur)?;
                    record(format!("{}.{li}.weight", self.prefix), gw, &mut grads);
                    gx
                }
                LayerSpec::BatchNorm { .. } => {
                    let gamma = self.param(li, "gamma");
                    let (gx, ggamma, gbeta) = match pass.mode {
                        Mode::Train => {
                            let stats = pass.bn[li].as_ref().ok_or_else(|| {
                                Error::usage("train-mode pass missing batch statistics".to_string())
                            })?;
                            bn_backward_train(x, gamma, stats, &cur)?
                        }
                        Mode::Eval => bn_backward_eval(
                            x,
                            gamma,
                            self.running_stat(li, "running_mean"),
                            self.running_stat(li, "running_var"),
                            &cur,
                        )?,
                    };
                    record(format!("{}.{li}.gamma", self.prefix), ggamma, &mut grads);
                    record(format!("{}.{li}.beta", self.prefix), gbeta, &mut grads);
                    gx
                }
                LayerSpec::Relu => relu_backward(x, &cur)?,
                LayerSpec::AvgPool { window } => avg_pool_backward(&cur, *window, *window)?,
                LayerSpec::GlobalAvgPool => {
                    let [_, _, h, w] = x.dims4()?;
                    global_avg_pool_backward(&cur, h, w)?
                }
                LayerSpec::Flatten => cur.reshape(x.shape())?,
            };
            cur = gin;
            act_idx -= 1;
            for (idx, g) in seeds.iter().filter(|(i, _)| *i == act_idx) {
                debug_assert_eq!(*idx, act_idx);
                cur = cur.add(g)?;
            }
        }
        Ok((grads, cur))
    }

    /// Fold the batch statistics of a train-mode pass into the running
    /// statistics.
    pub fn commit_bn(&mut self, pass: &Pass) -> Result<()> {
        if pass.mode != Mode::Train {
            return Err(Error::usage(
                "running statistics only update from train-mode passes",
            ));
        }
        if pass.version != self.version {
            return Err(Error::usage("stale forward cache for running-stat update"));
        }
        for (i, stats) in pass.bn.iter().enumerate() {
            if let Some(stats) = stats {
                let mean_name = format!("{}.{i}.running_mean", self.prefix);
                let var_name = format!("{}.{i}.running_var", self.prefix);
                bn_update_running(
                    self.running.get_mut(&mean_name).expect("slot exists"),
                    &stats.mean,
                    BN_MOMENTUM,
                );
                bn_update_running(
                    self.running.get_mut(&var_name).expect("slot exists"),
                    &stats.var,
                    BN_MOMENTUM,
                );
            }
        }
        Ok(())
    }

    /// Restore parameters and running statistics from named tensors that use
    /// this net's prefix. Shapes must match exactly.
    pub fn load_from(&mut self, source: &ParamMap) -> Result<()> {
        for (name, tensor) in self.params.iter_mut() {
            let found = source
                .get(name)
                .ok_or_else(|| Error::corrupt(format!("missing parameter {name}")))?;
            if found.shape() != tensor.shape() {
                return Err(Error::corrupt(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    tensor.shape()
                )));
            }
            *tensor = found.clone();
        }
        for (name, tensor) in self.running.iter_mut() {
            let found = source
                .get(name)
                .ok_or_else(|| Error::corrupt(format!("missing running stat {name}")))?;
            if found.shape() != tensor.shape() {
                return Err(Error::corrupt(format!(
                    "running stat {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    tensor.shape()
                )));
            }
            *tensor = found.clone();
        }
        self.version += 1;
        Ok(())
    }

    /// All named tensors (parameters then running stats), for checkpointing.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter().chain(self.running.iter())
    }
}

// ---------------------------------------------------------------------------
// NetworkSpec and Model
// ---------------------------------------------------------------------------

/// Architecture description: feature encoder plus a single dense classifier
/// `feature_dim -> num_classes` (with bias).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: Shape,
    pub encoder: Vec<LayerSpec>,
    /// Indices one past the last layer of each building block; strictly
    /// increasing, last entry equals the encoder length. Empty means a single
    /// block spanning the whole encoder.
    #[serde(default)]
    pub block_boundaries: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let shapes = shape_chain(&self.encoder, &self.input)?;
        let out = *shapes.last().expect("chain includes input");
        if out
            != (Shape::Vector {
                c: self.feature_dim,
            })
        {
            return Err(Error::build(format!(
                "encoder output is {out}, expected vec({}) — end the encoder with \
                 global_avg_pool + flatten (or flatten)",
                self.feature_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::build("a classifier needs at least two classes"));
        }
        if !self.block_boundaries.is_empty() {
            let b = &self.block_boundaries;
            if !b.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::build(format!(
                    "block boundaries not strictly increasing: {b:?}"
                )));
            }
            if *b.last().unwrap() != self.encoder.len() {
                return Err(Error::build(format!(
                    "last block boundary {} must equal encoder length {}",
                    b.last().unwrap(),
                    self.encoder.len()
                )));
            }
        }
        Ok(())
    }

    /// Effective boundaries (a single block when none are declared).
    pub fn boundaries(&self) -> Vec<usize> {
        if self.block_boundaries.is_empty() {
            vec![self.encoder.len()]
        } else {
            self.block_boundaries.clone()
        }
    }

    pub fn classifier(&self) -> LayerSpec {
        LayerSpec::Dense {
            input: self.feature_dim,
            output: self.num_classes,
            bias: true,
        }
    }

    /// Encoder plus classifier as one layer list.
    pub fn full_layers(&self) -> Vec<LayerSpec> {
        let mut layers = self.encoder.clone();
        layers.push(self.classifier());
        layers
    }

    pub fn param_count(&self) -> u64 {
        param_count_layers(&self.encoder) + self.classifier().param_count()
    }

    pub fn encoder_param_count(&self) -> u64 {
        param_count_layers(&self.encoder)
    }

    pub fn classifier_param_count(&self) -> u64 {
        self.classifier().param_count()
    }

    /// Activation index of the last feature maps: the point where the
    /// trailing `global_avg_pool`/`flatten` suffix begins. Equals the encoder
    /// length when the encoder has no such suffix (vector features only).
    pub fn maps_point(&self) -> usize {
        let mut s = self.encoder.len();
        while s > 0 {
            match self.encoder[s - 1] {
                LayerSpec::GlobalAvgPool | LayerSpec::Flatten => s -= 1,
                _ => break,
            }
        }
        s
    }
}

/// A materialized network: the encoder stack with the classifier appended as
/// its final dense layer.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NetworkSpec,
    pub net: Net,
    pub mode: Mode,
    pub frozen: BTreeSet<String>,
}

pub const MODEL_PREFIX: &str = "model";

impl Model {
    /// Build with seeded initialization. Deterministic: the same spec and seed
    /// produce identical parameters.
    pub fn build(spec: &NetworkSpec, rng: &Rng) -> Result<Model> {
        spec.validate()?;
        let net = Net::build(spec.full_layers(), spec.input, MODEL_PREFIX, rng)?;
        Ok(Model {
            spec: spec.clone(),
            net,
            mode: Mode::Train,
            frozen: BTreeSet::new(),
        })
    }

    pub fn encoder_len(&self) -> usize {
        self.spec.encoder.len()
    }

    /// Index of the classifier layer inside the underlying net.
    pub fn classifier_index(&self) -> usize {
        self.spec.encoder.len()
    }

    pub fn classifier_weight(&self) -> &Tensor {
        self.net
            .params()
            .get(&self.classifier_param_name("weight"))
            .expect("built")
    }

    pub fn classifier_bias(&self) -> &Tensor {
        self.net
            .params()
            .get(&self.classifier_param_name("bias"))
            .expect("built")
    }

    pub fn classifier_param_name(&self, slot: &str) -> String {
        format!("{MODEL_PREFIX}.{}.{slot}", self.classifier_index())
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Freeze every parameter (teacher models during distillation).
    pub fn freeze_all(&mut self) {
        self.frozen = self.net.params().keys().cloned().collect();
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Pass> {
        self.net.forward(batch, self.mode)
    }

    /// Penultimate features of a pass (`N x feature_dim`).
    pub fn features<'a>(&self, pass: &'a Pass) -> &'a Tensor {
        &pass.acts[self.encoder_len()]
    }

    pub fn logits<'a>(&self, pass: &'a Pass) -> &'a Tensor {
        pass.output()
    }

    pub fn backward_from_logits(&self, pass: &Pass, grad_logits: Tensor) -> Result<GradMap> {
        let (grads, _) =
            self.net
                .backward(pass, &[(self.encoder_len() + 1, grad_logits)], &self.frozen)?;
        Ok(grads)
    }

    /// Backward from the penultimate features; the classifier receives no
    /// gradient entry.
    pub fn backward_from_features(&self, pass: &Pass, grad_features: Tensor) -> Result<GradMap> {
        let (grads, _) =
            self.net
                .backward(pass, &[(self.encoder_len(), grad_features)], &self.frozen)?;
        Ok(grads)
    }

    pub fn param_count(&self) -> u64 {
        self.spec.param_count()
    }

    /// Copy the encoder (layers, parameters, running stats) out as a
    /// standalone stack under a new prefix. Used to seed perfect-alignment
    /// setups and truncated students.
    pub fn encoder_net(&self, prefix: &str) -> Net {
        self.encoder_prefix_net(self.encoder_len(), prefix)
    }

    /// Copy the first `cut` encoder layers as a standalone stack.
    pub fn encoder_prefix_net(&self, cut: usize, prefix: &str) -> Net {
        let mut net = Net::build(
            self.spec.encoder[..cut].to_vec(),
            self.spec.input,
            prefix,
            &Rng::new(0),
        )
        .expect("validated spec prefix");
        let mut src = ParamMap::new();
        for (name, t) in self.net.named_tensors() {
            let rest = name
                .strip_prefix(MODEL_PREFIX)
                .and_then(|r| r.strip_prefix('.'));
            if let Some(rest) = rest {
                if let Some((idx, slot)) = rest.split_once('.') {
                    if let Ok(i) = idx.parse::<usize>() {
                        if i < cut {
                            src.insert(format!("{prefix}.{i}.{slot}"), t.clone());
                        }
                    }
                }
            }
        }
        net.load_from(&src)
            .expect("encoder tensors cover the prefix");
        net
    }
}

// ---------------------------------------------------------------------------
// split_reuse
// ---------------------------------------------------------------------------

/// Result of splitting a teacher for tail reuse: the student keeps a trainable
/// encoder prefix; the teacher contributes its last `k` blocks plus the
/// classifier, frozen.
#[derive(Debug, Clone)]
pub struct ReuseSplit {
    /// Trainable prefix of the student encoder (layer specs).
    pub student_prefix: Vec<LayerSpec>,
    /// Activation index in the student encoder where the prefix ends.
    pub student_cut: usize,
    /// Activation index in the teacher encoder where the reused tail begins;
    /// the alignment target is the teacher activation at this index.
    pub teacher_cut: usize,
    /// Teacher encoder layers in the tail (classifier not included here).
    pub tail: Vec<LayerSpec>,
}

impl ReuseSplit {
    /// Parameters of the reused teacher part: tail blocks plus classifier.
    pub fn tail_param_count(&self, teacher: &NetworkSpec) -> u64 {
        param_count_layers(&self.tail) + teacher.classifier_param_count()
    }
}

/// Split off the last `k` teacher blocks (plus classifier) for reuse and
/// truncate the student encoder at its matching boundary. `k = 0` reuses the
/// classifier only.
pub fn split_reuse(teacher: &NetworkSpec, student: &NetworkSpec, k: usize) -> Result<ReuseSplit> {
    teacher.validate()?;
    student.validate()?;
    let tb = teacher.boundaries();
    let sb = student.boundaries();
    if k > tb.len() {
        return Err(Error::config(format!(
            "cannot reuse {k} blocks: teacher has {} block boundaries",
            tb.len()
        )));
    }
    if k > sb.len() {
        return Err(Error::config(format!(
            "cannot reuse {k} blocks: student has {} block boundaries",
            sb.len()
        )));
    }
    // The cut sits at the boundary before the last k blocks.
    let cut_at = |bounds: &[usize], len: usize| -> usize {
        if k == 0 {
            len
        } else if k == bounds.len() {
            0
        } else {
            bounds[bounds.len() - 1 - k]
        }
    };
    let teacher_cut = cut_at(&tb, teacher.encoder.len());
    let student_cut = cut_at(&sb, student.encoder.len());
    Ok(ReuseSplit {
        student_prefix: student.encoder[..student_cut].to_vec(),
        student_cut,
        teacher_cut,
        tail: teacher.encoder[teacher_cut..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, relative_error, DEFAULT_STEP};

    fn mlp_spec(dims: &[(usize, usize)], feature_dim: usize, num_classes: usize) -> NetworkSpec {
        let encoder = dims
            .iter()
            .map(|&(i, o)| LayerSpec::Dense {
                input: i,
                output: o,
                bias: true,
            })
            .collect();
        NetworkSpec {
            input: Shape::Vector {
                c: dims.first().map(|d| d.0).unwrap_or(feature_dim),
            },
            encoder,
            block_boundaries: vec![],
            feature_dim,
            num_classes,
        }
    }

    fn small_cnn(widths: (usize, usize), classes: usize) -> NetworkSpec {
        let (w1, w2) = widths;
        NetworkSpec {
            input: Shape::Map { c: 2, h: 4, w: 4 },
            encoder: vec![
                LayerSpec::Conv {
                    in_ch: 2,
                    out_ch: w1,
                    kernel: 3,
                    depthwise: false,
                },
                LayerSpec::BatchNorm { channels: w1 },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    in_ch: w1,
                    out_ch: w2,
                    kernel: 3,
                    depthwise: false,
                },
                LayerSpec::BatchNorm { channels: w2 },
                LayerSpec::Relu,
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Flatten,
            ],
            block_boundaries: vec![3, 9],
            feature_dim: w2,
            num_classes: classes,
        }
    }

    #[test]
    fn build_is_deterministic() {
        let spec = mlp_spec(&[(2, 2)], 2, 2);
        let a = Model::build(&spec, &Rng::new(5)).unwrap();
        let b = Model::build(&spec, &Rng::new(5)).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        let c = Model::build(&spec, &Rng::new(6)).unwrap();
        assert_ne!(a.net.params(), c.net.params());
    }

    #[test]
    fn incompatible_stack_is_a_build_error() {
        let spec = NetworkSpec {
            input: Shape::Vector { c: 3 },
            encoder: vec![
                LayerSpec::Dense {
                    input: 3,
                    output: 4,
                    bias: true,
                },
                LayerSpec::Dense {
                    input: 5,
                    output: 2,
                    bias: true,
                },
            ],
            block_boundaries: vec![],
            feature_dim: 2,
            num_classes: 2,
        };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("layer 1"), "{err}");
        assert!(err.contains("layer 0"), "{err}");
    }

    #[test]
    fn kaiming_bound_is_respected() {
        let spec = mlp_spec(&[(24, 48)], 48, 3);
        let model = Model::build(&spec, &Rng::new(7)).unwrap();
        let w = model.net.params().get("model.0.weight").unwrap();
        let bound = (6.0 / 24.0f64).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() <= bound));
        // and the draws actually explore the range
        assert!(w.max_abs() > 0.5 * bound);
    }

    #[test]
    fn identity_dense_network_is_identity() {
        let spec = mlp_spec(&[(2, 2)], 2, 2);
        let mut model = Model::build(&spec, &Rng::new(1)).unwrap();
        // identity-initialize every dense weight, zero biases
        for (name, t) in model.net.params_mut().iter_mut() {
            if name.ends_with("weight") {
                *t = Tensor::eye(2);
            } else {
                *t = Tensor::zeros(&[2]);
            }
        }
        let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.25, -3.0, 1.5]).unwrap();
        let pass = model.forward(&x).unwrap();
        assert_eq!(model.logits(&pass), &x);
    }

    #[test]
    fn zero_input_bias_free_net_gives_zero_logits() {
        let spec = NetworkSpec {
            input: Shape::Vector { c: 3 },
            encoder: vec![LayerSpec::Dense {
                input: 3,
                output: 4,
                bias: false,
            }],
            block_boundaries: vec![],
            feature_dim: 4,
            num_classes: 2,
        };
        let model = Model::build(&spec, &Rng::new(2)).unwrap();
        // classifier bias is zero-initialized, so all logits vanish
        let x = Tensor::zeros(&[2, 3]);
        let pass = model.forward(&x).unwrap();
        assert!(model.logits(&pass).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn logits_match_external_classifier_product() {
        let spec = small_cnn((4, 6), 3);
        let mut model = Model::build(&spec, &Rng::new(11)).unwrap();
        model.set_mode(Mode::Eval);
        let mut rng = Rng::new(12);
        let x = Tensor::uniform(&[2, 2, 4, 4], 0.0, 1.0, &mut rng);
        let pass = model.forward(&x).unwrap();
        let f = model.features(&pass);
        let wt = model.classifier_weight().transpose2().unwrap();
        let mut want = crate::tensor::matmul(f, &wt).unwrap();
        let b = model.classifier_bias();
        for s in 0..2 {
            for k in 0..3 {
                want.data_mut()[s * 3 + k] += b.data()[k];
            }
        }
        assert!(model.logits(&pass).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn eval_forward_is_idempotent_bitwise() {
        let spec = small_cnn((4, 6), 3);
        let mut model = Model::build(&spec, &Rng::new(13)).unwrap();
        model.set_mode(Mode::Eval);
        let mut rng = Rng::new(14);
        let x = Tensor::uniform(&[3, 2, 4, 4], 0.0, 1.0, &mut rng);
        let a = model.forward(&x).unwrap();
        let b = model.forward(&x).unwrap();
        assert_eq!(model.logits(&a), model.logits(&b));
        assert_eq!(a.acts, b.acts);
    }

    #[test]
    fn zero_upstream_grad_gives_zero_param_grads() {
        let spec = small_cnn((3, 4), 2);
        let model = Model::build(&spec, &Rng::new(15)).unwrap();
        let mut rng = Rng::new(16);
        let x = Tensor::uniform(&[2, 2, 4, 4], 0.0, 1.0, &mut rng);
        let pass = model.forward(&x).unwrap();
        let gz = Tensor::zeros(&[2, 2]);
        let grads = model.backward_from_logits(&pass, gz).unwrap();
        assert!(!grads.is_empty());
        for (_, g) in grads {
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let spec = mlp_spec(&[(2, 3)], 3, 2);
        let mut model = Model::build(&spec, &Rng::new(17)).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let pass = model.forward(&x).unwrap();
        model.net.params_mut(); // version bump
        let err = model.backward_from_logits(&pass, Tensor::zeros(&[1, 2]));
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_params_receive_no_gradient_entry() {
        let spec = mlp_spec(&[(2, 3)], 3, 2);
        let mut model = Model::build(&spec, &Rng::new(18)).unwrap();
        let fc_w = model.classifier_param_name("weight");
        model.frozen.insert(fc_w.clone());
        let x = Tensor::filled(&[1, 2], 0.3);
        let pass = model.forward(&x).unwrap();
        let grads = model
            .backward_from_logits(&pass, Tensor::filled(&[1, 2], 1.0))
            .unwrap();
        assert!(!grads.contains_key(&fc_w));
        assert!(grads.contains_key("model.0.weight"));
    }

    #[test]
    fn full_cnn_gradients_match_finite_differences() {
        // The end-to-end oracle: perturb each parameter, recompute a scalar
        // loss, compare against the analytic backward.
        let spec = small_cnn((3, 4), 2);
        let model = Model::build(&spec, &Rng::new(19)).unwrap();
        let mut rng = Rng::new(20);
        let x = Tensor::uniform(&[4, 2, 4, 4], 0.0, 1.0, &mut rng);
        let target = Tensor::uniform(&[4, 2], -1.0, 1.0, &mut rng);

        // loss = sum(logits * target); grad wrt logits = target.
        let pass = model.forward(&x).unwrap();
        let grads = model.backward_from_logits(&pass, target.clone()).unwrap();

        for (name, analytic) in &grads {
            let flat_loss = |t: &Tensor| -> crate::error::Result<f64> {
                let mut m = model.clone();
                m.net.params_mut().insert(name.clone(), t.clone());
                let p = m.forward(&x)?;
                Ok(m.logits(&p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&l, &t)| l * t)
                    .sum())
            };
            let base = model.net.params().get(name).unwrap();
            let fd = finite_diff_grad(flat_loss, base, DEFAULT_STEP).unwrap();
            let rel = relative_error(analytic, &fd);
            assert!(rel < 1e-6, "{name}: rel err {rel}");
        }
    }

    #[test]
    fn encoder_classifier_partition() {
        let spec = small_cnn((4, 6), 5);
        assert_eq!(
            spec.encoder_param_count() + spec.classifier_param_count(),
            spec.param_count()
        );
    }

    #[test]
    fn empty_layer_list_counts_zero() {
        assert_eq!(param_count_layers(&[]), 0);
    }

    #[test]
    fn split_reuse_k0_is_classifier_only() {
        let t = small_cnn((4, 6), 3);
        let s = small_cnn((2, 3), 3);
        let split = split_reuse(&t, &s, 0).unwrap();
        assert!(split.tail.is_empty());
        assert_eq!(split.tail_param_count(&t), t.classifier_param_count());
        assert_eq!(split.student_cut, s.encoder.len());
    }

    #[test]
    fn split_reuse_partitions_teacher_params() {
        let t = small_cnn((4, 6), 3);
        let s = small_cnn((2, 3), 3);
        let split = split_reuse(&t, &s, 1).unwrap();
        let prefix_count = param_count_layers(&t.encoder[..split.teacher_cut]);
        assert_eq!(prefix_count + split.tail_param_count(&t), t.param_count());
    }

    #[test]
    fn split_reuse_full_reuse_reproduces_teacher() {
        let t = small_cnn((4, 6), 3);
        let s = small_cnn((2, 3), 3);
        let split = split_reuse(&t, &s, 2).unwrap();
        assert_eq!(split.teacher_cut, 0);
        assert!(split.student_prefix.is_empty());
        // Forwarding the teacher input through the tail reproduces the full
        // teacher: eval_from(0) on the model net must equal a plain forward.
        let mut teacher = Model::build(&t, &Rng::new(30)).unwrap();
        teacher.set_mode(Mode::Eval);
        let mut rng = Rng::new(31);
        let x = Tensor::uniform(&[2, 2, 4, 4], 0.0, 1.0, &mut rng);
        let direct = teacher.forward(&x).unwrap();
        let via_tail = teacher.net.eval_from(0, &x, Mode::Eval).unwrap();
        assert_eq!(teacher.logits(&direct), &via_tail);
    }

    #[test]
    fn split_reuse_rejects_out_of_range_k() {
        let t = small_cnn((4, 6), 3);
        let s = small_cnn((2, 3), 3);
        assert!(matches!(split_reuse(&t, &s, 3), Err(Error::Config(_))));
    }

    #[test]
    fn maps_point_finds_trailing_pool() {
        let spec = small_cnn((4, 6), 3);
        // encoder ends with [AvgPool, GlobalAvgPool, Flatten]; the maps point
        // is the input of GlobalAvgPool.
        assert_eq!(spec.maps_point(), 7);
        let mlp = mlp_spec(&[(2, 3)], 3, 2);
        assert_eq!(mlp.maps_point(), mlp.encoder.len());
    }
}
