use super::{Network, TaskId};
use crate::error::{Error, Result};
use crate::loss::Labeling;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Recorded outputs of one head: `[samples, labels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResponses<S> {
    task: TaskId,
    labeling: Labeling,
    probs: Tensor<S>,
}

impl<S: Scalar> TaskResponses<S> {
    pub fn task(&self) -> &TaskId {
        &self.task
    }

    pub fn labeling(&self) -> Labeling {
        self.labeling
    }

    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }
}

/// Old-task outputs on new-task inputs, captured once and never modified.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedResponses<S> {
    fingerprint: u64,
    samples: usize,
    tasks: Vec<TaskResponses<S>>,
}

impl<S: Scalar> RecordedResponses<S> {
    /// Fingerprint of the network the responses were taken from.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn tasks(&self) -> &[TaskResponses<S>] {
        &self.tasks
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.task.clone()).collect()
    }

    /// Number of stored probability vectors.
    pub fn vector_count(&self) -> usize {
        self.samples * self.tasks.len()
    }

    pub fn task(&self, task: &TaskId) -> Result<&TaskResponses<S>> {
        self.tasks
            .iter()
            .find(|t| &t.task == task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Stored rows of `task` for the given sample indices.
    pub fn batch(&self, task: &TaskId, indices: &[usize]) -> Result<Tensor<S>> {
        self.task(task)?.probs.select_rows(indices)
    }
}

/// Evaluation-mode outputs of `old_tasks` on every row of `inputs`.
pub fn record_responses<S: Scalar>(
    net: &Network<S>,
    inputs: &Tensor<S>,
    old_tasks: &[TaskId],
) -> Result<RecordedResponses<S>> {
    if old_tasks.is_empty() {
        return Err(Error::invalid("no old tasks to record responses for"));
    }
    let (probs, _) = net.predict_many(inputs, old_tasks)?;
    let tasks = old_tasks
        .iter()
        .zip(probs)
        .map(|(t, probs)| {
            Ok(TaskResponses {
                task: t.clone(),
                labeling: net.head(t)?.spec().labeling(),
                probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecordedResponses {
        fingerprint: net.fingerprint(),
        samples: inputs.rows(),
        tasks,
    })
}

/// Trunk outputs captured before training, for representation-drift
/// penalties.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordedFeatures<S> {
    fingerprint: u64,
    features: Tensor<S>,
}

impl<S: Scalar> RecordedFeatures<S> {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<S>> {
        self.features.select_rows(indices)
    }
}

pub fn record_features<S: Scalar>(
    net: &Network<S>,
    inputs: &Tensor<S>,
) -> Result<RecordedFeatures<S>> {
    let (_, features) = net.predict_many(inputs, &[])?;
    Ok(RecordedFeatures {
        fingerprint: net.fingerprint(),
        features,
    })
}
