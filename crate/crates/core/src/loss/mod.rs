//! Loss functions on probability vectors.
//!
//! The functions here work on single examples and are the reference
//! definitions. [`batched`] builds the same losses on a [`Tape`] over a
//! batch so they can be differentiated.
//!
//! Conventions shared by every cross-entropy style loss:
//! probabilities are clamped to at least `1e-12` before `log`, and terms
//! whose target weight is exactly zero contribute nothing (`0·log 0 = 0`).
//!
//! [`Tape`]: crate::autodiff::Tape

pub mod batched;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamId, Parameter, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Whether a head predicts one class (softmax) or independent labels (sigmoid).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Labeling {
    Single,
    Multi,
}

/// Temperature for the distillation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillationConfig {
    pub temperature: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        DistillationConfig { temperature: 2.0 }
    }
}

impl DistillationConfig {
    pub fn new(temperature: f64) -> Result<Self> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(DistillationConfig { temperature })
        } else {
            Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )))
        }
    }
}

/// Loss used to keep current old-task outputs close to recorded ones.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ResponseLossKind {
    /// Cross-entropy between temperature-rescaled distributions.
    Kd(DistillationConfig),
    L1,
    L2,
    /// Plain cross-entropy, no rescaling.
    Ce,
}

impl Default for ResponseLossKind {
    fn default() -> Self {
        ResponseLossKind::Kd(DistillationConfig::default())
    }
}

impl fmt::Display for ResponseLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResponseLossKind::Kd(c) => write!(f, "kd(T={})", c.temperature),
            ResponseLossKind::L1 => f.write_str("l1"),
            ResponseLossKind::L2 => f.write_str("l2"),
            ResponseLossKind::Ce => f.write_str("ce"),
        }
    }
}

impl FromStr for ResponseLossKind {
    type Err = Error;

    /// Accepts `kd` (T = 2), `kd(T=<t>)`, `kd:<t>`, `l1`, `l2` and `ce`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "kd" => return Ok(ResponseLossKind::default()),
            "l1" => return Ok(ResponseLossKind::L1),
            "l2" => return Ok(ResponseLossKind::L2),
            "ce" => return Ok(ResponseLossKind::Ce),
            _ => {}
        }
        let t = s
            .strip_prefix("kd(t=")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("kd:"));
        match t.map(str::parse::<f64>) {
            Some(Ok(t)) => Ok(ResponseLossKind::Kd(DistillationConfig::new(t)?)),
            _ => Err(Error::invalid(format!("unknown response loss `{s}`"))),
        }
    }
}

fn check_lengths(a: usize, b: usize, op: &'static str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: vec![a],
            right: vec![b],
        })
    }
}

fn clamped_ln<S: Scalar>(p: S) -> S {
    p.max(S::lit(PROB_FLOOR)).ln()
}

/// `−Σ target_i · ln(probs_i)` with the shared clamping conventions.
fn cross_entropy<S: Scalar>(target: &[S], probs: &[S]) -> S {
    let mut total = S::zero();
    for (&y, &p) in target.iter().zip(probs) {
        if y != S::zero() {
            total -= y * clamped_ln(p);
        }
    }
    total
}

/// Sum of per-label binary cross-entropies.
fn binary_cross_entropy<S: Scalar>(target: &[S], probs: &[S]) -> S {
    let mut total = S::zero();
    for (&y, &p) in target.iter().zip(probs) {
        let (ny, np) = (S::one() - y, S::one() - p);
        if y != S::zero() {
            total -= y * clamped_ln(p);
        }
        if ny != S::zero() {
            total -= ny * clamped_ln(np);
        }
    }
    total
}

/// New-task classification loss for one example.
///
/// Single-label: multinomial logistic loss `−y·ln ŷ` against a one-hot
/// target. Multi-label: per-label binary cross-entropy summed over labels.
pub fn ce_loss<S: Scalar>(target: &[S], probs: &[S], labeling: Labeling) -> Result<S> {
    check_lengths(target.len(), probs.len(), "ce_loss")?;
    Ok(match labeling {
        Labeling::Single => cross_entropy(target, probs),
        Labeling::Multi => binary_cross_entropy(target, probs),
    })
}

/// `p_i^{1/T} / Σ_j p_j^{1/T}`.
///
/// Computed in log space so small temperatures do not underflow. `T = 1`
/// returns the input unchanged.
pub fn temperature_rescale<S: Scalar>(probs: &[S], temperature: f64) -> Result<Vec<S>> {
    DistillationConfig::new(temperature)?;
    if probs.iter().any(|&p| !p.is_finite() || p < S::zero()) {
        return Err(Error::invalid(
            "probabilities must be finite and non-negative",
        ));
    }
    if probs.iter().all(|&p| p == S::zero()) {
        return Err(Error::invalid(
            "cannot rescale an all-zero probability vector",
        ));
    }
    if temperature == 1.0 {
        return Ok(probs.to_vec());
    }
    let inv_t = S::lit(1.0 / temperature);
    let logs: Vec<S> = probs.iter().map(|&p| p.ln()).collect();
    let max = logs.iter().copied().fold(S::neg_infinity(), S::max);
    let raised: Vec<S> = logs.iter().map(|&l| ((l - max) * inv_t).exp()).collect();
    let total: S = raised.iter().copied().sum();
    Ok(raised.into_iter().map(|v| v / total).collect())
}

/// Knowledge-distillation loss between a recorded and a current
/// distribution: cross-entropy of the temperature-rescaled vectors.
pub fn kd_loss<S: Scalar>(recorded: &[S], current: &[S], cfg: DistillationConfig) -> Result<S> {
    check_lengths(recorded.len(), current.len(), "kd_loss")?;
    let y = temperature_rescale(recorded, cfg.temperature)?;
    let y_hat = temperature_rescale(current, cfg.temperature)?;
    Ok(cross_entropy(&y, &y_hat))
}

/// Distillation for a multi-label head: each label is a two-way
/// distribution `[p, 1−p]`; losses are summed over labels.
pub fn kd_loss_multi_label<S: Scalar>(
    recorded: &[S],
    current: &[S],
    cfg: DistillationConfig,
) -> Result<S> {
    check_lengths(recorded.len(), current.len(), "kd_loss")?;
    let mut total = S::zero();
    for (&y, &p) in recorded.iter().zip(current) {
        total += kd_loss(&[y, S::one() - y], &[p, S::one() - p], cfg)?;
    }
    Ok(total)
}

/// Response-preserving loss of the chosen kind.
pub fn alt_response_loss<S: Scalar>(
    kind: ResponseLossKind,
    recorded: &[S],
    current: &[S],
) -> Result<S> {
    check_lengths(recorded.len(), current.len(), "alt_response_loss")?;
    let pairs = recorded.iter().zip(current);
    Ok(match kind {
        ResponseLossKind::Kd(cfg) => kd_loss(recorded, current, cfg)?,
        ResponseLossKind::L1 => pairs.map(|(&y, &p)| (y - p).abs()).sum(),
        ResponseLossKind::L2 => {
            let sq: S = pairs.map(|(&y, &p)| (y - p) * (y - p)).sum();
            S::lit(0.5) * sq
        }
        ResponseLossKind::Ce => cross_entropy(recorded, current),
    })
}

/// Frozen copy of a parameter set, flattened in the order given.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSnapshot<S> {
    ids: Vec<ParamId>,
    lens: Vec<usize>,
    values: Vec<S>,
}

impl<S: Scalar> ParameterSnapshot<S> {
    pub fn capture<'a>(params: impl IntoIterator<Item = &'a Parameter<S>>) -> Self {
        let mut snap = ParameterSnapshot {
            ids: Vec::new(),
            lens: Vec::new(),
            values: Vec::new(),
        };
        for p in params {
            snap.ids.push(p.id());
            snap.lens.push(p.value().len());
            snap.values.extend_from_slice(p.value().data());
        }
        snap
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Stored values of one parameter.
    pub fn slice(&self, id: ParamId) -> Option<&[S]> {
        let pos = self.ids.iter().position(|&i| i == id)?;
        let start: usize = self.lens[..pos].iter().sum();
        Some(&self.values[start..start + self.lens[pos]])
    }
}

/// `½·λ·‖w − w₀‖²` over flattened parameters.
pub fn weight_anchor<S: Scalar>(
    live: &[S],
    snapshot: &ParameterSnapshot<S>,
    lambda: S,
) -> Result<S> {
    check_lengths(live.len(), snapshot.len(), "weight_anchor")?;
    let sq: S = live
        .iter()
        .zip(snapshot.values())
        .map(|(&w, &w0)| (w - w0) * (w - w0))
        .sum();
    Ok(S::lit(0.5) * lambda * sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    const T2: DistillationConfig = DistillationConfig { temperature: 2.0 };

    #[test]
    fn ce_uniform_and_perfect() {
        let l = ce_loss(&[0.0, 1.0, 0.0, 0.0], &[0.25; 4], Labeling::Single).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let l = ce_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], Labeling::Single).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn ce_hand_value() {
        let l = ce_loss(&[0.0f64, 1.0, 0.0], &[0.2, 0.7, 0.1], Labeling::Single).unwrap();
        assert!((l - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn ce_length_mismatch() {
        assert!(ce_loss(&[1.0f64], &[0.5, 0.5], Labeling::Single).is_err());
    }

    #[test]
    fn multi_label_ce_sums_binary_terms() {
        let l = ce_loss(&[1.0, 0.0], &[0.8, 0.3], Labeling::Multi).unwrap();
        let expect = -(0.8f64.ln()) - (0.7f64.ln());
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn rescale_examples() {
        let r = temperature_rescale(&[0.9f64, 0.1], 2.0).unwrap();
        assert!((r[0] - 0.75).abs() < 1e-12 && (r[1] - 0.25).abs() < 1e-12);
        let u = temperature_rescale(&[0.25f64; 4], 3.7).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let v = [0.2f64, 0.5, 0.3];
        assert_eq!(temperature_rescale(&v, 1.0).unwrap(), v.to_vec());
        assert!(temperature_rescale(&[0.0f64, 0.0], 2.0).is_err());
        assert!(temperature_rescale(&[0.5f64, 0.5], 0.0).is_err());
    }

    #[test]
    fn kd_examples() {
        assert_eq!(kd_loss(&[1.0f64, 0.0], &[1.0, 0.0], T2).unwrap(), 0.0);
        let l = kd_loss(&[0.9f64, 0.1], &[0.5, 0.5], T2).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let y = [0.6f64, 0.3, 0.1];
        let yt = temperature_rescale(&y, 2.0).unwrap();
        let entropy: f64 = -yt.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((kd_loss(&y, &y, T2).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn alt_losses() {
        let a = [0.3f64, 0.7];
        assert_eq!(
            alt_response_loss(ResponseLossKind::L2, &a, &a).unwrap(),
            0.0
        );
        let l1 = alt_response_loss(ResponseLossKind::L1, &[1.0f64, 0.0], &[0.6, 0.4]).unwrap();
        assert!((l1 - 0.8).abs() < 1e-12);
        let ce = alt_response_loss(ResponseLossKind::Ce, &[0.25f64; 4], &[0.25; 4]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
        assert!("huber".parse::<ResponseLossKind>().is_err());
        assert_eq!(
            "kd(T=3)".parse::<ResponseLossKind>().unwrap(),
            ResponseLossKind::Kd(DistillationConfig { temperature: 3.0 })
        );
    }

    #[test]
    fn weight_anchor_examples() {
        let p = Parameter::new(ParamId(0), crate::tensor::Tensor::vector(&[1.0f64, 1.0]));
        let snap = ParameterSnapshot::capture([&p]);
        assert_eq!(weight_anchor(&[1.0, 1.0], &snap, 1.0).unwrap(), 0.0);
        assert_eq!(weight_anchor(&[4.0, 5.0], &snap, 1.0).unwrap(), 12.5);
        assert_eq!(weight_anchor(&[9.0, -3.0], &snap, 0.0).unwrap(), 0.0);
        assert!(weight_anchor(&[1.0], &snap, 1.0).is_err());
    }
}
