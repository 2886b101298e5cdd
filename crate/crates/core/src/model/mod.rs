//! Multi-head networks: a shared trunk split into lower and upper segments,
//! plus one head per task.
//!
//! The trunk and the heads partition the parameter set. Parameter ids are
//! assigned from a per-network counter and never reused, so an id names
//! the same tensor across expansion, checkpointing and training.

mod checkpoint;
mod expand;
mod freeze;
mod layer;
mod record;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use expand::{expand_network, ExpansionSpec};
pub use freeze::{freeze_plan, FreezeKind, FreezePlan};
pub use layer::{xavier_uniform, Layer, Mode};
pub use record::{
    record_features, record_responses, RecordedFeatures, RecordedResponses, TaskResponses,
};

use std::fmt;

use rand::RngCore;
use sha2::{Digest, Sha256};

use crate::autodiff::{HasParameters, ParamId, Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::loss::Labeling;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name of a task; one head per task.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(String);

impl TaskId {
    pub fn new(name: impl Into<String>) -> Self {
        TaskId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TaskId {
    fn from(s: &str) -> Self {
        TaskId(s.to_owned())
    }
}

impl From<String> for TaskId {
    fn from(s: String) -> Self {
        TaskId(s)
    }
}

/// Shape of a task head. `hidden` lists extra hidden widths placed between
/// the branch point and the output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub labels: usize,
    pub multi_label: bool,
    pub hidden: Vec<usize>,
    /// Dropout after each extra hidden layer; 0 disables it.
    pub hidden_dropout: f64,
}

impl HeadSpec {
    pub fn classes(labels: usize) -> Self {
        HeadSpec {
            labels,
            multi_label: false,
            hidden: Vec::new(),
            hidden_dropout: 0.0,
        }
    }

    pub fn multi_label(labels: usize) -> Self {
        HeadSpec {
            multi_label: true,
            ..HeadSpec::classes(labels)
        }
    }

    pub fn with_hidden(mut self, widths: Vec<usize>, dropout: f64) -> Self {
        self.hidden = widths;
        self.hidden_dropout = dropout;
        self
    }

    pub fn labeling(&self) -> Labeling {
        if self.multi_label {
            Labeling::Multi
        } else {
            Labeling::Single
        }
    }

    fn validate(&self) -> Result<()> {
        if self.labels == 0 {
            return Err(Error::invalid("a head needs at least one label"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        check_dropout(self.hidden_dropout)
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("dropout must be in [0,1), got {p}")))
    }
}

/// Optional convolutional stem: `channels` filters of size `kernel`,
/// then relu and 2×2 max pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

/// Architecture of a fresh network.
///
/// The dense widths in `hidden` are drawn in order from the rng whatever
/// the branch depth, so networks that differ only in `branch_depth` agree
/// on every trunk parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    /// Per-sample input shape: `[features]`, or `[channels, height, width]`
    /// when a conv stem is used.
    pub input_shape: Vec<usize>,
    pub conv: Option<ConvSpec>,
    pub hidden: Vec<usize>,
    /// Dense blocks (after the conv stem) that belong to the lower trunk.
    pub lower_blocks: usize,
    /// Dropout after every hidden dense block.
    pub dropout: f64,
    /// Number of top hidden blocks that are task specific.
    pub branch_depth: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            input_shape: vec![784],
            conv: None,
            hidden: vec![256, 128],
            lower_blocks: 1,
            dropout: 0.5,
            branch_depth: 0,
        }
    }
}

impl NetworkSpec {
    fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::invalid("input shape must be non-empty and positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if self.branch_depth > self.hidden.len() {
            return Err(Error::invalid(format!(
                "branch depth {} exceeds {} hidden layers",
                self.branch_depth,
                self.hidden.len()
            )));
        }
        if self.lower_blocks > self.hidden.len() - self.branch_depth {
            return Err(Error::invalid("lower trunk has more blocks than the trunk"));
        }
        check_dropout(self.dropout)?;
        if let Some(c) = self.conv {
            let [_, h, w] = self.input_shape[..] else {
                return Err(Error::invalid(
                    "a conv stem needs a [channels, height, width] input",
                ));
            };
            if c.channels == 0 || c.kernel == 0 || c.kernel > h.min(w) {
                return Err(Error::invalid("conv stem does not fit the input"));
            }
        }
        Ok(())
    }
}

/// Which part of a network a parameter belongs to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    TrunkLower,
    TrunkUpper,
    Head(TaskId),
}

/// Task-specific layers ending in an output layer.
#[derive(Clone, Debug)]
pub struct Head<S> {
    task: TaskId,
    spec: HeadSpec,
    layers: Vec<Layer<S>>,
}

impl<S: Scalar> Head<S> {
    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<S>] {
        &self.layers
    }

    /// Weight and bias of the final layer.
    pub fn output_parameters(&self) -> Vec<&Parameter<S>> {
        self.layers
            .iter()
            .rev()
            .find(|l| l.is_dense())
            .map(Layer::parameters)
            .unwrap_or_default()
    }
}

/// Probabilities and the trunk output of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutputs {
    /// Trunk output (the last shared representation).
    pub features: Var,
    /// One probability matrix per requested task, in request order.
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<S> {
    input_shape: Vec<usize>,
    branch_depth: usize,
    trunk_lower: Vec<Layer<S>>,
    trunk_upper: Vec<Layer<S>>,
    heads: Vec<Head<S>>,
    next_id: u64,
    expansion_masks: std::collections::BTreeMap<ParamId, Vec<bool>>,
}

/// Rows per tape in evaluation-only passes.
const EVAL_CHUNK: usize = 512;

impl<S: Scalar> Network<S> {
    /// Builds a network with one head for `base_task`. The top
    /// `branch_depth` hidden blocks go into that head.
    pub fn new(
        spec: &NetworkSpec,
        base_task: TaskId,
        base_head: HeadSpec,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        spec.validate()?;
        base_head.validate()?;
        let mut net = Network {
            input_shape: spec.input_shape.clone(),
            branch_depth: spec.branch_depth,
            trunk_lower: Vec::new(),
            trunk_upper: Vec::new(),
            heads: Vec::new(),
            next_id: 0,
            expansion_masks: Default::default(),
        };
        let mut dims = spec.input_shape.clone();
        if let Some(c) = spec.conv {
            let fan_in = dims[0] * c.kernel * c.kernel;
            let fan_out = c.channels * c.kernel * c.kernel;
            let kernel = xavier_uniform(
                &[c.channels, dims[0], c.kernel, c.kernel],
                fan_in,
                fan_out,
                rng,
            );
            let kernel = net.fresh(kernel);
            let bias = net.fresh(Tensor::zeros(&[c.channels]));
            net.trunk_lower.push(Layer::Conv2d { kernel, bias });
            net.trunk_lower.push(Layer::Relu);
            net.trunk_lower.push(Layer::MaxPool2x2);
            net.trunk_lower.push(Layer::Flatten);
            let (h, w) = (dims[1] - c.kernel + 1, dims[2] - c.kernel + 1);
            dims = vec![c.channels * (h / 2) * (w / 2)];
            if dims[0] == 0 {
                return Err(Error::invalid("input too small for conv stem and pooling"));
            }
        } else if dims.len() > 1 {
            net.trunk_lower.push(Layer::Flatten);
            dims = vec![dims.iter().product()];
        }
        let trunk_blocks = spec.hidden.len() - spec.branch_depth;
        let mut width = dims[0];
        let mut branch = Vec::new();
        for (i, &out) in spec.hidden.iter().enumerate() {
            let block = net.dense_block(width, out, spec.dropout, rng);
            if i < spec.lower_blocks {
                net.trunk_lower.extend(block);
            } else if i < trunk_blocks {
                net.trunk_upper.extend(block);
            } else {
                branch.extend(block);
            }
            width = out;
        }
        net.push_head(base_task, base_head, branch, rng)?;
        Ok(net)
    }

    fn fresh(&mut self, value: Tensor<S>) -> Parameter<S> {
        let p = Parameter::new(ParamId(self.next_id), value);
        self.next_id += 1;
        p
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Layer<S> {
        let weight = self.fresh(xavier_uniform(&[fan_in, fan_out], fan_in, fan_out, rng));
        let bias = self.fresh(Tensor::zeros(&[fan_out]));
        Layer::Dense { weight, bias }
    }

    fn dense_block(
        &mut self,
        fan_in: usize,
        fan_out: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Vec<Layer<S>> {
        let mut block = vec![self.dense(fan_in, fan_out, rng), Layer::Relu];
        if dropout > 0.0 {
            block.push(Layer::Dropout(dropout));
        }
        block
    }

    fn push_head(
        &mut self,
        task: TaskId,
        spec: HeadSpec,
        mut layers: Vec<Layer<S>>,
        rng: &mut dyn RngCore,
    ) -> Result<()> {
        let mut width = match layers.iter().rev().find_map(Layer::dense_out) {
            Some(w) => w,
            None => self.trunk_width(),
        };
        for &h in &spec.hidden {
            layers.extend(self.dense_block(width, h, spec.hidden_dropout, rng));
            width = h;
        }
        layers.push(self.dense(width, spec.labels, rng));
        self.heads.push(Head { task, spec, layers });
        Ok(())
    }

    /// Attaches a new head. Branch layers (when `branch_depth > 0`) are
    /// copied from the first head; extra hidden layers and the output layer
    /// are Xavier-initialized with zero biases. Existing parameters are not
    /// touched.
    pub fn add_head(&mut self, task: TaskId, spec: HeadSpec, rng: &mut dyn RngCore) -> Result<()> {
        if self.has_task(&task) {
            return Err(Error::DuplicateTask(task.to_string()));
        }
        spec.validate()?;
        let mut branch = Vec::new();
        if self.branch_depth > 0 {
            let source = self.heads[0].layers.clone();
            let mut dense_seen = 0;
            for layer in source {
                if layer.is_dense() {
                    if dense_seen == self.branch_depth {
                        break;
                    }
                    dense_seen += 1;
                }
                branch.push(layer.with_fresh_ids(&mut self.next_id));
            }
            // trailing relu/dropout of the last branch block were copied above
        }
        self.push_head(task, spec, branch, rng)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Flat per-sample input width.
    pub fn input_width(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn branch_depth(&self) -> usize {
        self.branch_depth
    }

    /// Width of the trunk output, i.e. of every head's input.
    pub fn trunk_width(&self) -> usize {
        self.trunk_lower
            .iter()
            .chain(&self.trunk_upper)
            .rev()
            .find_map(Layer::dense_out)
            .unwrap_or_else(|| {
                // no dense trunk layer: conv stem or raw input
                self.trunk_lower
                    .iter()
                    .find_map(|l| match l {
                        Layer::Conv2d { kernel, .. } => {
                            let s = kernel.value().shape();
                            let (h, w) = (
                                self.input_shape[1] - s[2] + 1,
                                self.input_shape[2] - s[3] + 1,
                            );
                            Some(s[0] * (h / 2) * (w / 2))
                        }
                        _ => None,
                    })
                    .unwrap_or_else(|| self.input_width())
            })
    }

    pub fn trunk_lower(&self) -> &[Layer<S>] {
        &self.trunk_lower
    }

    pub fn trunk_upper(&self) -> &[Layer<S>] {
        &self.trunk_upper
    }

    pub fn heads(&self) -> &[Head<S>] {
        &self.heads
    }

    /// Task ids in the order their heads were added.
    pub fn tasks(&self) -> Vec<TaskId> {
        self.heads.iter().map(|h| h.task.clone()).collect()
    }

    pub fn has_task(&self, task: &TaskId) -> bool {
        self.heads.iter().any(|h| &h.task == task)
    }

    pub fn head(&self, task: &TaskId) -> Result<&Head<S>> {
        self.heads
            .iter()
            .find(|h| &h.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Runs the trunk once and the requested heads in order.
    ///
    /// `x` is `[batch, input_width]`. In train mode dropout masks are drawn
    /// from the rng in layer order: trunk first, then heads in the order
    /// given.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        tasks: &[TaskId],
        mode: Mode<'_>,
    ) -> Result<ForwardOutputs> {
        self.forward_inner(tape, x, tasks, mode, true)
    }

    /// Like [`Network::forward`] but the trunk always runs in eval mode, so
    /// its dropout is off; only the heads see `mode`.
    pub fn forward_fixed_trunk(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        tasks: &[TaskId],
        mode: Mode<'_>,
    ) -> Result<ForwardOutputs> {
        self.forward_inner(tape, x, tasks, mode, false)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<S>,
        x: &Tensor<S>,
        tasks: &[TaskId],
        mut mode: Mode<'_>,
        trunk_dropout: bool,
    ) -> Result<ForwardOutputs> {
        let heads = tasks
            .iter()
            .map(|t| self.head(t))
            .collect::<Result<Vec<_>>>()?;
        let b = x.rows();
        if x.row_len() != self.input_width() || x.shape().len() != 2 {
            return Err(Error::Shape {
                op: "network input",
                left: x.shape().to_vec(),
                right: vec![b, self.input_width()],
            });
        }
        let mut h = tape.constant(x.clone());
        if self.input_shape.len() > 1 {
            let mut shape = vec![b];
            shape.extend_from_slice(&self.input_shape);
            h = tape.reshape(h, &shape)?;
        }
        for layer in self.trunk_lower.iter().chain(&self.trunk_upper) {
            h = if trunk_dropout {
                layer.forward(tape, h, &mut mode)?
            } else {
                layer.forward(tape, h, &mut Mode::Eval)?
            };
        }
        let features = h;
        let mut probs = Vec::with_capacity(heads.len());
        for head in heads {
            let mut z = features;
            for layer in &head.layers {
                z = layer.forward(tape, z, &mut mode)?;
            }
            probs.push(match head.spec.labeling() {
                Labeling::Single => tape.softmax(z)?,
                Labeling::Multi => tape.sigmoid(z)?,
            });
        }
        Ok(ForwardOutputs { features, probs })
    }

    /// Probabilities of one task for a batch, on a private tape.
    pub fn forward_task(&self, x: &Tensor<S>, task: &TaskId, mode: Mode<'_>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, std::slice::from_ref(task), mode)?;
        Ok(tape.value(out.probs[0]).clone())
    }

    /// Evaluation-mode probabilities of one task for any number of rows.
    pub fn predict(&self, x: &Tensor<S>, task: &TaskId) -> Result<Tensor<S>> {
        Ok(self
            .predict_many(x, std::slice::from_ref(task))?
            .0
            .remove(0))
    }

    /// Evaluation-mode probabilities for several tasks plus the trunk
    /// output, processed in chunks.
    pub fn predict_many(
        &self,
        x: &Tensor<S>,
        tasks: &[TaskId],
    ) -> Result<(Vec<Tensor<S>>, Tensor<S>)> {
        let n = x.rows();
        let mut probs: Vec<Vec<S>> = vec![Vec::new(); tasks.len()];
        let mut feats = Vec::new();
        let mut start = 0;
        let mut shapes = Vec::new();
        let mut feat_width = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = x.select_rows(&idx)?;
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, &chunk, tasks, Mode::Eval)?;
            for (acc, &v) in probs.iter_mut().zip(&out.probs) {
                acc.extend_from_slice(tape.value(v).data());
            }
            if shapes.is_empty() {
                shapes = out.probs.iter().map(|&v| tape.value(v).row_len()).collect();
            }
            let f = tape.value(out.features);
            feat_width = f.row_len();
            feats.extend_from_slice(f.data());
            start = end;
        }
        let probs = probs
            .into_iter()
            .zip(shapes)
            .map(|(d, w)| Tensor::new(vec![n, w], d))
            .collect::<Result<Vec<_>>>()?;
        Ok((probs, Tensor::new(vec![n, feat_width], feats)?))
    }

    fn segment_layers(&self, segment: &Segment) -> Result<&[Layer<S>]> {
        Ok(match segment {
            Segment::TrunkLower => &self.trunk_lower,
            Segment::TrunkUpper => &self.trunk_upper,
            Segment::Head(t) => &self.head(t)?.layers,
        })
    }

    /// Segments in canonical order: lower trunk, upper trunk, heads.
    pub fn segments(&self) -> Vec<Segment> {
        let mut s = vec![Segment::TrunkLower, Segment::TrunkUpper];
        s.extend(self.heads.iter().map(|h| Segment::Head(h.task.clone())));
        s
    }

    pub fn segment_parameters(&self, segment: &Segment) -> Result<Vec<&Parameter<S>>> {
        Ok(self
            .segment_layers(segment)?
            .iter()
            .flat_map(Layer::parameters)
            .collect())
    }

    pub fn segment_of(&self, id: ParamId) -> Option<Segment> {
        self.segments().into_iter().find(|s| {
            self.segment_parameters(s)
                .is_ok_and(|ps| ps.iter().any(|p| p.id() == id))
        })
    }

    /// Trunk parameters (θs).
    pub fn shared_parameters(&self) -> Vec<&Parameter<S>> {
        self.trunk_lower
            .iter()
            .chain(&self.trunk_upper)
            .flat_map(Layer::parameters)
            .collect()
    }

    pub fn parameter(&self, id: ParamId) -> Option<&Parameter<S>> {
        self.parameters().into_iter().find(|p| p.id() == id)
    }

    /// Number of scalar entries over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value().len()).sum()
    }

    /// Marks every parameter trainable and clears update masks.
    pub fn unfreeze_all(&mut self) {
        for p in self.parameters_mut() {
            p.set_trainable(true);
            let _ = p.set_update_mask(None);
        }
    }

    pub(crate) fn expansion_masks(&self) -> &std::collections::BTreeMap<ParamId, Vec<bool>> {
        &self.expansion_masks
    }

    /// Order-stable 64-bit digest of every parameter's id, shape and value
    /// bytes (as little-endian f64), in canonical order.
    pub fn fingerprint(&self) -> u64 {
        fingerprint_parameters(self.parameters())
    }
}

pub(crate) fn fingerprint_parameters<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a Parameter<S>>,
) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.id().0.to_le_bytes());
        h.update((p.value().shape().len() as u64).to_le_bytes());
        for &d in p.value().shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in p.value().data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

impl<S: Scalar> HasParameters<S> for Network<S> {
    fn parameters(&self) -> Vec<&Parameter<S>> {
        self.trunk_lower
            .iter()
            .chain(&self.trunk_upper)
            .chain(self.heads.iter().flat_map(|h| &h.layers))
            .flat_map(Layer::parameters)
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<S>> {
        self.trunk_lower
            .iter_mut()
            .chain(&mut self.trunk_upper)
            .chain(self.heads.iter_mut().flat_map(|h| &mut h.layers))
            .flat_map(Layer::parameters_mut)
            .collect()
    }
}
