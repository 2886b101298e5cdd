//! Finite-difference verification of whole networks and losses.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Tape, Var, FD_STEP};
use crate::error::Result;
use crate::loss::batched::{feature_drift, new_task_loss, response_loss};
use crate::loss::{DistillationConfig, Labeling, ResponseLossKind};
use crate::model::{ConvSpec, HeadSpec, Mode, Network, NetworkSpec, TaskId};
use crate::tensor::Tensor;

/// Inputs are redrawn until every relu, abs and max-pool decision is at
/// least this far from its kink.
pub const MIN_KINK_MARGIN: f64 = 1e-3;

const MAX_PARAMETERS: usize = 120;
const MAX_REDRAWS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LossKind {
    Ce,
    Kd,
    Bce,
    L2,
    Drift,
}

/// One checked network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkCheck {
    pub description: String,
    pub scalars: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<NetworkCheck>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn entries_checked(&self) -> usize {
        self.checks.iter().map(|c| c.scalars).sum()
    }
}

fn random_spec(rng: &mut dyn RngCore) -> (NetworkSpec, usize) {
    let conv = rng.random_bool(0.3);
    if conv {
        let side = rng.random_range(4..=5);
        let spec = NetworkSpec {
            input_shape: vec![1, side, side],
            conv: Some(ConvSpec {
                channels: rng.random_range(1..=2),
                kernel: 2,
            }),
            hidden: if rng.random_bool(0.5) {
                vec![rng.random_range(2..=4)]
            } else {
                vec![]
            },
            lower_blocks: 0,
            dropout: 0.0,
            branch_depth: 0,
        };
        (spec, side * side)
    } else {
        let inputs = rng.random_range(2..=5);
        let layers = rng.random_range(0..=2);
        let hidden: Vec<usize> = (0..layers).map(|_| rng.random_range(2..=5)).collect();
        let spec = NetworkSpec {
            input_shape: vec![inputs],
            conv: None,
            lower_blocks: hidden.len().min(1),
            branch_depth: if hidden.len() == 2 {
                rng.random_range(0..=1)
            } else {
                0
            },
            hidden,
            dropout: 0.0,
        };
        (spec, inputs)
    }
}

fn random_tensor(shape: Vec<usize>, rng: &mut dyn RngCore, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

fn random_probs(rows: usize, cols: usize, rng: &mut dyn RngCore) -> Tensor<f64> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Builds `count` random networks of at most three weight layers and about
/// a hundred scalars, each with a randomly chosen loss, and compares tape
/// gradients with central finite differences.
pub fn random_network_suite(count: usize, seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(count);
    while checks.len() < count {
        let (spec, width) = random_spec(&mut rng);
        let kind = [
            LossKind::Ce,
            LossKind::Kd,
            LossKind::Bce,
            LossKind::L2,
            LossKind::Drift,
        ][rng.random_range(0..5)];
        let labels = rng.random_range(2..=4);
        let head = if kind == LossKind::Bce {
            HeadSpec::multi_label(labels)
        } else {
            HeadSpec::classes(labels)
        };
        let task = TaskId::new("t");
        let mut net: Network<f64> = Network::new(&spec, task.clone(), head, &mut rng)?;
        // random biases so the check does not only see zero-initialized ones
        for p in crate::autodiff::HasParameters::parameters_mut(&mut net) {
            if p.value().shape().len() == 1 {
                for v in p.value_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        let scalars = net.scalar_count();
        if scalars > MAX_PARAMETERS {
            continue;
        }
        let batch = rng.random_range(1..=3);
        let target = match kind {
            LossKind::Ce => {
                let mut t = vec![0.0; batch * labels];
                for r in 0..batch {
                    t[r * labels + rng.random_range(0..labels)] = 1.0;
                }
                Tensor::new(vec![batch, labels], t)?
            }
            LossKind::Bce => {
                let t = (0..batch * labels)
                    .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                    .collect();
                Tensor::new(vec![batch, labels], t)?
            }
            LossKind::Kd | LossKind::L2 => random_probs(batch, labels, &mut rng),
            LossKind::Drift => random_tensor(vec![batch, net.trunk_width()], &mut rng, 0.0, 1.0),
        };

        let mut x = None;
        for _ in 0..MAX_REDRAWS {
            let cand = random_tensor(vec![batch, width], &mut rng, -1.0, 1.0);
            let mut tape = Tape::new();
            net.forward(&mut tape, &cand, std::slice::from_ref(&task), Mode::Eval)?;
            if tape.min_kink_margin() > MIN_KINK_MARGIN.max(10.0 * FD_STEP) {
                x = Some(cand);
                break;
            }
        }
        let Some(x) = x else { continue };

        let loss = |m: &Network<f64>, tape: &mut Tape<f64>| -> Result<Var> {
            let out = m.forward(tape, &x, std::slice::from_ref(&task), Mode::Eval)?;
            let p = out.probs[0];
            match kind {
                LossKind::Ce => new_task_loss(tape, p, &target, Labeling::Single),
                LossKind::Bce => new_task_loss(tape, p, &target, Labeling::Multi),
                LossKind::Kd => response_loss(
                    tape,
                    ResponseLossKind::Kd(DistillationConfig::default()),
                    p,
                    &target,
                    Labeling::Single,
                ),
                LossKind::L2 => {
                    response_loss(tape, ResponseLossKind::L2, p, &target, Labeling::Single)
                }
                LossKind::Drift => feature_drift(tape, out.features, &target, 0.2),
            }
        };
        let report = gradient_check(&mut net, loss, tolerance)?;
        checks.push(NetworkCheck {
            description: format!(
                "input {:?} conv {:?} hidden {:?} branch {} labels {labels} loss {kind:?} batch {batch}",
                spec.input_shape,
                spec.conv.map(|c| (c.channels, c.kernel)),
                spec.hidden,
                spec.branch_depth
            ),
            scalars,
            max_rel_error: report.max_rel_error,
            passed: report.passed,
        });
    }
    Ok(SuiteReport { checks, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = random_network_suite(10, 7, 1e-4).unwrap();
        assert_eq!(r.checks.len(), 10);
        assert!(r.passed(), "{:?}", r.checks);
        assert!(r.checks.iter().all(|c| c.scalars <= MAX_PARAMETERS));
    }
}
