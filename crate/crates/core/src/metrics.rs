//! Evaluation: top-1 accuracy for single-label tasks, mean average
//! precision for multi-label ones.

use std::fmt;
use std::str::FromStr;

use crate::data::{Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::model::{Network, TaskId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    Accuracy,
    MeanAveragePrecision,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::MeanAveragePrecision => "mAP",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "mAP" => Ok(MetricKind::MeanAveragePrecision),
            _ => Err(Error::invalid(format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub kind: MetricKind,
    /// In `[0, 1]`.
    pub value: f64,
}

/// One evaluated (method, task, stage, seed) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub method: String,
    pub task: TaskId,
    pub stage: usize,
    pub seed: u64,
    pub kind: MetricKind,
    pub value: f64,
    pub split: Split,
    /// Seconds spent training the run that produced the network.
    pub wall_time: f64,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy<S: Scalar>(probs: &Tensor<S>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || probs.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            probs.rows(),
            labels.len()
        )));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(i, &l)| argmax(probs.row(*i)) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean precision at the rank of each positive, ranking by descending
/// score with ties broken by ascending sample index. `None` without
/// positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut found = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            found += 1;
            total += found as f64 / (rank + 1) as f64;
        }
    }
    (found > 0).then(|| total / found as f64)
}

/// Mean of the per-label average precisions over labels that have at least
/// one positive.
pub fn mean_average_precision<S: Scalar>(
    scores: &Tensor<S>,
    flags: &[bool],
    labels: usize,
) -> Result<f64> {
    let n = scores.rows();
    if n == 0 || scores.row_len() != labels || flags.len() != n * labels {
        return Err(Error::invalid("scores and flags do not match"));
    }
    let mut aps = Vec::new();
    for k in 0..labels {
        let col: Vec<f64> = (0..n).map(|i| scores.row(i)[k].as_f64()).collect();
        let pos: Vec<bool> = (0..n).map(|i| flags[i * labels + k]).collect();
        aps.extend(average_precision(&col, &pos));
    }
    if aps.is_empty() {
        return Err(Error::invalid("no label has a positive sample"));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Evaluation-mode metric of one task on a held-out split.
pub fn evaluate<S: Scalar>(
    net: &Network<S>,
    dataset: &Dataset<S>,
    task: &TaskId,
) -> Result<Metric> {
    if dataset.split() == Split::Train {
        return Err(Error::invalid("evaluation needs a val or test split"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let probs = net.predict(dataset.inputs(), task)?;
    if probs.row_len() != dataset.label_count() {
        return Err(Error::Shape {
            op: "evaluate",
            left: probs.shape().to_vec(),
            right: vec![dataset.len(), dataset.label_count()],
        });
    }
    Ok(match dataset.labels() {
        Labels::Single(cls) => Metric {
            kind: MetricKind::Accuracy,
            value: accuracy(&probs, cls)?,
        },
        Labels::Multi { flags, labels } => Metric {
            kind: MetricKind::MeanAveragePrecision,
            value: mean_average_precision(&probs, flags, *labels)?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSpec, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positive_ranked_second_of_two() {
        assert_eq!(average_precision(&[0.9, 0.1], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.9, 0.1], &[false, false]), None);
    }

    #[test]
    fn ties_rank_earlier_samples_first() {
        // equal scores: sample 0 outranks sample 1
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
    }

    #[test]
    fn hand_worked_precision() {
        // ranks of positives 1 and 3: (1/1 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking_is_one() {
        let scores = Tensor::new(vec![3, 2], vec![0.9, 0.1, 0.2, 0.8, 0.1, 0.7]).unwrap();
        let flags = [true, false, false, true, false, true];
        assert_eq!(mean_average_precision(&scores, &flags, 2).unwrap(), 1.0);
    }

    #[test]
    fn uniform_predictions_are_chance() {
        let c = 5;
        let labels: Vec<usize> = (0..100).map(|i| i % c).collect();
        let probs = Tensor::full(&[100, c], 1.0 / c as f64);
        assert_eq!(accuracy(&probs, &labels).unwrap(), 1.0 / c as f64);
        assert_eq!(argmax(&[0.2, 0.2, 0.1]), 0);
    }

    #[test]
    fn evaluate_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = NetworkSpec {
            input_shape: vec![2],
            hidden: vec![3],
            dropout: 0.0,
            ..NetworkSpec::default()
        };
        let t = TaskId::new("a");
        let net: Network<f64> =
            Network::new(&spec, t.clone(), HeadSpec::classes(2), &mut rng).unwrap();
        let ds = Dataset::new(
            Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
            vec![2],
            Labels::Single(vec![0, 1]),
            vec![0, 1],
            Split::Test,
        )
        .unwrap();
        let m = evaluate(&net, &ds, &t).unwrap();
        assert_eq!(m.kind, MetricKind::Accuracy);
        assert!((0.0..=1.0).contains(&m.value));
        assert!(evaluate(&net, &ds.clone().with_split(Split::Train), &t).is_err());
        assert!(evaluate(&net, &ds, &TaskId::new("b")).is_err());
    }
}
