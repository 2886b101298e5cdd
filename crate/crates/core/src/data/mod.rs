//! Datasets, task construction and preprocessing.

mod idx;
mod split;
mod synth;

pub use idx::{
    decode_idx_images, decode_idx_labels, encode_idx_images, encode_idx_labels, load_idx,
    write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use split::{class_split, stratified_holdout, subsample};
pub use synth::{synth_multilabel, synth_tasks, MultiLabelSpec, SynthSpec};

use std::fmt;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::model::TaskId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-sample labels, indexed into the dataset's label space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Labels {
    Single(Vec<usize>),
    /// Row-major `[samples, labels]` membership flags.
    Multi {
        flags: Vec<bool>,
        labels: usize,
    },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(c) => c.len(),
            Labels::Multi { flags, labels } => flags.len() / labels,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Single(c) => Labels::Single(indices.iter().map(|&i| c[i]).collect()),
            Labels::Multi { flags, labels } => Labels::Multi {
                flags: indices
                    .iter()
                    .flat_map(|&i| flags[i * labels..(i + 1) * labels].iter().copied())
                    .collect(),
                labels: *labels,
            },
        }
    }
}

/// Who a task is and where its labels come from.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDefinition {
    pub id: TaskId,
    /// Source class (or label) ids owned by the task, in local-label order.
    pub classes: Vec<u32>,
    pub multi_label: bool,
}

/// Inputs stored as `[samples, features]` plus their labels.
///
/// `label_space[k]` is the source id of local label `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S> {
    inputs: Tensor<S>,
    sample_shape: Vec<usize>,
    labels: Labels,
    label_space: Vec<u32>,
    split: Split,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(
        inputs: Tensor<S>,
        sample_shape: Vec<usize>,
        labels: Labels,
        label_space: Vec<u32>,
        split: Split,
    ) -> Result<Self> {
        if inputs.shape().len() != 2 {
            return Err(Error::invalid("dataset inputs must be [samples, features]"));
        }
        if sample_shape.iter().product::<usize>() != inputs.row_len() {
            return Err(Error::Shape {
                op: "dataset sample shape",
                left: sample_shape,
                right: vec![inputs.row_len()],
            });
        }
        if labels.len() != inputs.rows() {
            return Err(Error::invalid(format!(
                "{} inputs but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        match &labels {
            Labels::Single(c) => {
                if let Some(&bad) = c.iter().find(|&&c| c >= label_space.len()) {
                    return Err(Error::invalid(format!(
                        "label {bad} outside a space of {}",
                        label_space.len()
                    )));
                }
            }
            Labels::Multi { labels, .. } => {
                if *labels != label_space.len() {
                    return Err(Error::invalid("multi-label width differs from label space"));
                }
            }
        }
        Ok(Dataset {
            inputs,
            sample_shape,
            labels,
            label_space,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor<S> {
        &self.inputs
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label_space(&self) -> &[u32] {
        &self.label_space
    }

    pub fn label_count(&self) -> usize {
        self.label_space.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn is_multi_label(&self) -> bool {
        self.labels.is_multi()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Dataset {
            inputs: self.inputs.select_rows(indices)?,
            sample_shape: self.sample_shape.clone(),
            labels: self.labels.select(indices),
            label_space: self.label_space.clone(),
            split: self.split,
        })
    }

    /// Targets of the listed rows: one-hot for single-label data, 0/1 flags
    /// for multi-label data.
    pub fn targets(&self, indices: &[usize]) -> Result<Tensor<S>> {
        let c = self.label_count();
        let mut t = vec![S::zero(); indices.len() * c];
        for (r, &i) in indices.iter().enumerate() {
            if i >= self.len() {
                return Err(Error::invalid(format!("row {i} out of range")));
            }
            match &self.labels {
                Labels::Single(cls) => t[r * c + cls[i]] = S::one(),
                Labels::Multi { flags, .. } => {
                    for k in 0..c {
                        if flags[i * c + k] {
                            t[r * c + k] = S::one();
                        }
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), c], t)
    }

    /// Sample count per local class (single-label data only).
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_count()];
        match &self.labels {
            Labels::Single(cls) => cls.iter().for_each(|&c| counts[c] += 1),
            Labels::Multi { flags, labels } => {
                for (i, &f) in flags.iter().enumerate() {
                    if f {
                        counts[i % labels] += 1;
                    }
                }
            }
        }
        counts
    }

    /// Concatenates datasets that share sample shape, label space and
    /// label kind.
    pub fn concat(parts: &[&Dataset<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let mut data = Vec::new();
        let mut single = Vec::new();
        let mut flags = Vec::new();
        for p in parts {
            if p.sample_shape != first.sample_shape
                || p.label_space != first.label_space
                || p.is_multi_label() != first.is_multi_label()
            {
                return Err(Error::invalid("datasets are not compatible"));
            }
            data.extend_from_slice(p.inputs.data());
            match &p.labels {
                Labels::Single(c) => single.extend_from_slice(c),
                Labels::Multi { flags: f, .. } => flags.extend_from_slice(f),
            }
        }
        let rows = data.len() / first.inputs.row_len();
        let labels = if first.is_multi_label() {
            Labels::Multi {
                flags,
                labels: first.label_count(),
            }
        } else {
            Labels::Single(single)
        };
        Dataset::new(
            Tensor::new(vec![rows, first.inputs.row_len()], data)?,
            first.sample_shape.clone(),
            labels,
            first.label_space.clone(),
            first.split,
        )
    }
}

/// Per-feature mean over all samples.
pub fn dataset_mean<S: Scalar>(dataset: &Dataset<S>) -> Result<Tensor<S>> {
    if dataset.is_empty() {
        return Err(Error::invalid("mean of an empty dataset"));
    }
    let w = dataset.inputs.row_len();
    let mut acc = vec![0.0f64; w];
    for i in 0..dataset.len() {
        for (a, &v) in acc.iter_mut().zip(dataset.inputs.row(i)) {
            *a += v.as_f64();
        }
    }
    let n = dataset.len() as f64;
    Ok(Tensor::vector(
        &acc.iter().map(|&a| S::lit(a / n)).collect::<Vec<_>>(),
    ))
}

/// Subtracts `mean` from every sample. `mean` is a scalar or has one entry
/// per feature.
pub fn normalize_mean_subtract<S: Scalar>(
    dataset: &Dataset<S>,
    mean: &Tensor<S>,
) -> Result<Dataset<S>> {
    let w = dataset.inputs.row_len();
    let per_feature: Vec<S> = if mean.len() == 1 {
        vec![mean.data()[0]; w]
    } else if mean.len() == w {
        mean.data().to_vec()
    } else {
        return Err(Error::Shape {
            op: "normalize_mean_subtract",
            left: mean.shape().to_vec(),
            right: dataset.sample_shape.clone(),
        });
    };
    let mut data = dataset.inputs.data().to_vec();
    for row in data.chunks_mut(w) {
        for (v, &m) in row.iter_mut().zip(&per_feature) {
            *v -= m;
        }
    }
    let mut out = dataset.clone();
    out.inputs = Tensor::new(dataset.inputs.shape().to_vec(), data)?;
    Ok(out)
}

/// Shifts each `[height, width]` image in a batch by a random offset of up
/// to `max_shift` pixels in each direction, filling with zeros.
pub fn random_shift<S: Scalar>(
    batch: &Tensor<S>,
    height: usize,
    width: usize,
    max_shift: usize,
    rng: &mut dyn RngCore,
) -> Result<Tensor<S>> {
    if batch.row_len() != height * width {
        return Err(Error::Shape {
            op: "random_shift",
            left: batch.shape().to_vec(),
            right: vec![height, width],
        });
    }
    let m = max_shift as i64;
    let mut out = vec![S::zero(); batch.len()];
    for (r, dst) in out.chunks_mut(height * width).enumerate() {
        let src = batch.row(r);
        let dy = rng.random_range(-m..=m);
        let dx = rng.random_range(-m..=m);
        for y in 0..height as i64 {
            let sy = y - dy;
            if !(0..height as i64).contains(&sy) {
                continue;
            }
            for x in 0..width as i64 {
                let sx = x - dx;
                if (0..width as i64).contains(&sx) {
                    dst[(y * width as i64 + x) as usize] = src[(sy * width as i64 + sx) as usize];
                }
            }
        }
    }
    Tensor::new(batch.shape().to_vec(), out)
}
