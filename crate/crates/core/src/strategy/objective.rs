use super::{Method, StrategyConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::loss::batched::{anchor_penalty, feature_drift, new_task_loss, response_loss};
use crate::loss::ParameterSnapshot;
use crate::model::{
    record_features, record_responses, Mode, Network, RecordedFeatures, RecordedResponses, TaskId,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// What the network looked like on the new-task images before training:
/// old-head responses, trunk outputs and the shared weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OldTaskMemory<S> {
    pub responses: Option<RecordedResponses<S>>,
    pub features: RecordedFeatures<S>,
    pub anchor: ParameterSnapshot<S>,
}

impl<S: Scalar> OldTaskMemory<S> {
    pub fn samples(&self) -> usize {
        self.features.features().rows()
    }
}

/// Records responses of every existing head (none if the network has no
/// head yet), trunk outputs and the shared weights.
pub fn remember<S: Scalar>(net: &Network<S>, inputs: &Tensor<S>) -> Result<OldTaskMemory<S>> {
    let tasks = net.tasks();
    let responses = if tasks.is_empty() {
        None
    } else {
        Some(record_responses(net, inputs, &tasks)?)
    };
    Ok(OldTaskMemory {
        responses,
        features: record_features(net, inputs)?,
        anchor: ParameterSnapshot::capture(net.shared_parameters()),
    })
}

/// A mini-batch of new-task samples. `indices` are rows of the training
/// set the memory was recorded on.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub inputs: Tensor<S>,
    pub targets: Tensor<S>,
    pub indices: Vec<usize>,
}

/// The objective of one step on a new-task batch.
///
/// * lwf, expansion+lwf: `L_new + λ_o · Σ_old response loss`
/// * fine-tune, fine-tune-fc, feature-extraction, expansion: `L_new`
/// * lfl: `L_new + λ_i · drift of the trunk output`
/// * l2-anchor: `L_new + ½ λ_o ‖θs − θs₀‖²`
///
/// Weight decay is left to the optimizer. The forward pass runs the new
/// head first and old heads after it, so old heads never change the
/// randomness seen by the trunk and new head.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    net: &Network<S>,
    batch: &Batch<S>,
    new_task: &TaskId,
    cfg: &StrategyConfig,
    memory: &OldTaskMemory<S>,
    mode: Mode<'_>,
) -> Result<Var> {
    let labeling = net.head(new_task)?.spec().labeling();
    match cfg.method {
        Method::JointTraining => Err(Error::invalid(
            "joint training has no single-task objective",
        )),
        Method::Lwf | Method::ExpansionLwf => {
            let responses = memory
                .responses
                .as_ref()
                .filter(|r| !r.tasks().is_empty())
                .ok_or_else(|| {
                    Error::invalid(format!("{} needs recorded old-task responses", cfg.method))
                })?;
            let old = responses.task_ids();
            let mut tasks = vec![new_task.clone()];
            tasks.extend(old.iter().cloned());
            let out = net.forward(tape, &batch.inputs, &tasks, mode)?;
            let l_new = new_task_loss(tape, out.probs[0], &batch.targets, labeling)?;
            let mut old_sum: Option<Var> = None;
            for (t, &p) in old.iter().zip(&out.probs[1..]) {
                let rec = responses.task(t)?;
                let l = response_loss(
                    tape,
                    cfg.response_loss,
                    p,
                    &responses.batch(t, &batch.indices)?,
                    rec.labeling(),
                )?;
                old_sum = Some(match old_sum {
                    Some(s) => tape.add(s, l)?,
                    None => l,
                });
            }
            let old_sum = old_sum.expect("at least one old task");
            let weighted = tape.scale(old_sum, S::lit(cfg.lambda_o))?;
            tape.add(l_new, weighted)
        }
        Method::FeatureExtraction => {
            let out =
                net.forward_fixed_trunk(tape, &batch.inputs, std::slice::from_ref(new_task), mode)?;
            new_task_loss(tape, out.probs[0], &batch.targets, labeling)
        }
        Method::FineTune | Method::FineTuneFc | Method::Expansion => {
            let out = net.forward(tape, &batch.inputs, std::slice::from_ref(new_task), mode)?;
            new_task_loss(tape, out.probs[0], &batch.targets, labeling)
        }
        Method::Lfl => {
            let out = net.forward(tape, &batch.inputs, std::slice::from_ref(new_task), mode)?;
            let l_new = new_task_loss(tape, out.probs[0], &batch.targets, labeling)?;
            let h0 = memory.features.batch(&batch.indices)?;
            let drift = feature_drift(tape, out.features, &h0, S::lit(cfg.lambda_i))?;
            tape.add(l_new, drift)
        }
        Method::L2Anchor => {
            let out = net.forward(tape, &batch.inputs, std::slice::from_ref(new_task), mode)?;
            let l_new = new_task_loss(tape, out.probs[0], &batch.targets, labeling)?;
            let anchor = anchor_penalty(
                tape,
                &net.shared_parameters(),
                &memory.anchor,
                S::lit(cfg.lambda_o),
            )?;
            tape.add(l_new, anchor)
        }
    }
}
