//! Differentiable batch versions of the losses.
//!
//! Every loss here is summed over labels and averaged over the batch
//! (leading dimension). Recorded responses and targets enter the tape as
//! constants, so gradients flow only into the current outputs.

use super::{temperature_rescale, Labeling, ParameterSnapshot, ResponseLossKind};
use crate::autodiff::{Parameter, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn batch_size<S: Scalar>(tape: &Tape<S>, v: Var) -> Result<usize> {
    match tape.value(v).shape() {
        [b, _] => Ok(*b),
        other => Err(Error::invalid(format!(
            "expected a [batch, width] output, got {other:?}"
        ))),
    }
}

fn check_target<S: Scalar>(
    tape: &Tape<S>,
    v: Var,
    target: &Tensor<S>,
    op: &'static str,
) -> Result<()> {
    let shape = tape.value(v).shape();
    if shape == target.shape() {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: shape.to_vec(),
            right: target.shape().to_vec(),
        })
    }
}

/// `−(1/B) Σ weights ⊙ ln(probs)`.
fn weighted_log_sum<S: Scalar>(
    tape: &mut Tape<S>,
    weights: Tensor<S>,
    probs: Var,
    b: usize,
) -> Result<Var> {
    let w = tape.constant(weights);
    let lp = tape.log(probs)?;
    let prod = tape.mul(w, lp)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -S::one() / S::lit(b as f64))
}

fn complement<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    t.map(|v| S::one() - v)
}

/// Cross-entropy between soft or hard targets and `probs`. Multi-label
/// heads use the binary form per label.
fn soft_cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    target: &Tensor<S>,
    labeling: Labeling,
    b: usize,
) -> Result<Var> {
    let pos = weighted_log_sum(tape, target.clone(), probs, b)?;
    match labeling {
        Labeling::Single => Ok(pos),
        Labeling::Multi => {
            let q = tape.affine(probs, -S::one(), S::one())?;
            let neg = weighted_log_sum(tape, complement(target), q, b)?;
            tape.add(pos, neg)
        }
    }
}

/// New-task classification loss over a batch. `targets` is one-hot for
/// single-label heads and 0/1 per label for multi-label heads.
pub fn new_task_loss<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    targets: &Tensor<S>,
    labeling: Labeling,
) -> Result<Var> {
    check_target(tape, probs, targets, "new_task_loss")?;
    let b = batch_size(tape, probs)?;
    soft_cross_entropy(tape, probs, targets, labeling, b)
}

fn rescale_rows<S: Scalar>(t: &Tensor<S>, temperature: f64) -> Result<Tensor<S>> {
    let width = *t.shape().last().unwrap_or(&1);
    let mut out = Vec::with_capacity(t.len());
    for row in t.data().chunks(width) {
        out.extend(temperature_rescale(row, temperature)?);
    }
    Tensor::new(t.shape().to_vec(), out)
}

fn distillation<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    recorded: &Tensor<S>,
    temperature: f64,
    labeling: Labeling,
    b: usize,
) -> Result<Var> {
    let inv_t = S::lit(1.0 / temperature);
    match labeling {
        Labeling::Single => {
            let target = rescale_rows(recorded, temperature)?;
            let q = if temperature == 1.0 {
                probs
            } else {
                let raised = tape.pow(probs, inv_t)?;
                tape.normalize_rows(raised)?
            };
            weighted_log_sum(tape, target, q, b)
        }
        Labeling::Multi => {
            // each label is the two-way distribution [p, 1 − p]
            let (mut yp, mut yq) = (
                Vec::with_capacity(recorded.len()),
                Vec::with_capacity(recorded.len()),
            );
            for &y in recorded.data() {
                let r = temperature_rescale(&[y, S::one() - y], temperature)?;
                yp.push(r[0]);
                yq.push(r[1]);
            }
            let shape = recorded.shape().to_vec();
            let yp = Tensor::new(shape.clone(), yp)?;
            let yq = Tensor::new(shape, yq)?;
            let q = tape.affine(probs, -S::one(), S::one())?;
            let (pp, qq) = if temperature == 1.0 {
                (probs, q)
            } else {
                let a = tape.pow(probs, inv_t)?;
                let c = tape.pow(q, inv_t)?;
                let total = tape.add(a, c)?;
                (tape.div(a, total)?, tape.div(c, total)?)
            };
            let lp = weighted_log_sum(tape, yp, pp, b)?;
            let lq = weighted_log_sum(tape, yq, qq, b)?;
            tape.add(lp, lq)
        }
    }
}

/// Old-task response-preserving loss over a batch of current outputs
/// against the recorded ones.
pub fn response_loss<S: Scalar>(
    tape: &mut Tape<S>,
    kind: ResponseLossKind,
    probs: Var,
    recorded: &Tensor<S>,
    labeling: Labeling,
) -> Result<Var> {
    check_target(tape, probs, recorded, "response_loss")?;
    let b = batch_size(tape, probs)?;
    let inv_b = S::one() / S::lit(b as f64);
    match kind {
        ResponseLossKind::Kd(cfg) => {
            distillation(tape, probs, recorded, cfg.temperature, labeling, b)
        }
        ResponseLossKind::Ce => soft_cross_entropy(tape, probs, recorded, labeling, b),
        ResponseLossKind::L1 | ResponseLossKind::L2 => {
            let y = tape.constant(recorded.clone());
            let d = tape.sub(y, probs)?;
            let (e, factor) = if kind == ResponseLossKind::L1 {
                (tape.abs(d)?, inv_b)
            } else {
                (tape.square(d)?, S::lit(0.5) * inv_b)
            };
            let s = tape.sum(e)?;
            tape.scale(s, factor)
        }
    }
}

/// `weight · (1/B) Σ_n ‖h_n − h0_n‖²` for a batch of representations.
pub fn feature_drift<S: Scalar>(
    tape: &mut Tape<S>,
    features: Var,
    reference: &Tensor<S>,
    weight: S,
) -> Result<Var> {
    check_target(tape, features, reference, "feature_drift")?;
    let b = tape.value(features).shape().first().copied().unwrap_or(1);
    let h0 = tape.constant(reference.clone());
    let d = tape.sub(features, h0)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    tape.scale(s, weight / S::lit(b as f64))
}

/// `½·λ·‖w − w₀‖²` over the given parameters, each looked up in `snapshot`
/// by id.
pub fn anchor_penalty<S: Scalar>(
    tape: &mut Tape<S>,
    params: &[&Parameter<S>],
    snapshot: &ParameterSnapshot<S>,
    lambda: S,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for p in params {
        let w0 = snapshot
            .slice(p.id())
            .ok_or_else(|| Error::invalid(format!("parameter {} missing from snapshot", p.id())))?;
        let w0 = Tensor::new(p.value().shape().to_vec(), w0.to_vec())?;
        let w = tape.param(p);
        let c = tape.constant(w0);
        let d = tape.sub(w, c)?;
        let sq = tape.square(d)?;
        let s = tape.sum(sq)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero())),
    };
    tape.scale(total, S::lit(0.5) * lambda)
}
