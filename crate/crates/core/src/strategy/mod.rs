//! Training procedures: the response-preserving method, its baselines,
//! sequential task addition and old-task weight sweeps.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::loss::ResponseLossKind;
use crate::model::{ExpansionSpec, FreezeKind, HeadSpec};

mod objective;
mod scenario;
mod train;

pub use objective::{remember, total_loss, Batch, OldTaskMemory};
pub use scenario::{
    lambda_sweep, prepare_network, run_single, sequential_scenario, RunOutcome, ScenarioState,
    SingleTaskProblem, StageTask, SweepRow,
};
pub use train::{
    joint_batches, joint_phase, pretrain, train_joint, train_two_phase, warm_up, EpochLoss, Phase,
    TrainReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Lwf,
    FineTune,
    FineTuneFc,
    FeatureExtraction,
    Lfl,
    JointTraining,
    L2Anchor,
    Expansion,
    ExpansionLwf,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Lwf,
        Method::FineTune,
        Method::FineTuneFc,
        Method::FeatureExtraction,
        Method::Lfl,
        Method::JointTraining,
        Method::L2Anchor,
        Method::Expansion,
        Method::ExpansionLwf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lwf => "lwf",
            Method::FineTune => "fine-tune",
            Method::FineTuneFc => "fine-tune-fc",
            Method::FeatureExtraction => "feature-extraction",
            Method::Lfl => "lfl",
            Method::JointTraining => "joint-training",
            Method::L2Anchor => "l2-anchor",
            Method::Expansion => "expansion",
            Method::ExpansionLwf => "expansion+lwf",
        }
    }

    /// Freeze plan of the joint-optimize phase.
    pub fn freeze_kind(self) -> FreezeKind {
        match self {
            Method::Lwf => FreezeKind::LwfJoint,
            Method::FineTune => FreezeKind::FineTune,
            Method::FineTuneFc => FreezeKind::FineTuneFc,
            Method::FeatureExtraction => FreezeKind::FeatureExtraction,
            Method::Lfl => FreezeKind::Lfl,
            Method::JointTraining => FreezeKind::JointTraining,
            Method::L2Anchor => FreezeKind::L2Anchor,
            Method::Expansion => FreezeKind::Expansion,
            Method::ExpansionLwf => FreezeKind::ExpansionLwf,
        }
    }

    /// Methods whose objective distils recorded old-task responses.
    pub fn uses_responses(self) -> bool {
        matches!(self, Method::Lwf | Method::ExpansionLwf)
    }

    pub fn expands(self) -> bool {
        matches!(self, Method::Expansion | Method::ExpansionLwf)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}`")))
    }
}

/// Per-method settings. Fields that a method does not use are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyConfig {
    pub method: Method,
    /// Weight of the summed old-task response losses; also the coefficient
    /// of the weight anchor.
    pub lambda_o: f64,
    /// Weight of the representation-drift penalty.
    pub lambda_i: f64,
    pub response_loss: ResponseLossKind,
    pub warm_up: bool,
    /// Multiplier on the learning rate of both phases.
    pub lr_scale: f64,
    /// Extra multiplier on the shared-trunk learning rate in the
    /// joint-optimize phase.
    pub shared_lr_scale: f64,
    /// Hidden widths of the new head trained by feature extraction.
    pub extractor_hidden: Vec<usize>,
    pub expansion: ExpansionSpec,
}

impl StrategyConfig {
    pub fn new(method: Method) -> Self {
        StrategyConfig {
            method,
            lambda_o: 1.0,
            lambda_i: 0.2,
            response_loss: ResponseLossKind::default(),
            warm_up: true,
            lr_scale: if method == Method::FeatureExtraction {
                5.0
            } else {
                1.0
            },
            shared_lr_scale: 1.0,
            extractor_hidden: vec![128],
            expansion: ExpansionSpec {
                nodes_per_layer: 32,
                layers_from_top: 1,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_non_neg = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_non_neg(self.lambda_o) || !finite_non_neg(self.lambda_i) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if !(self.lr_scale > 0.0
            && self.lr_scale.is_finite()
            && self.shared_lr_scale > 0.0
            && self.shared_lr_scale.is_finite())
        {
            return Err(Error::invalid("learning-rate scales must be positive"));
        }
        if self.extractor_hidden.contains(&0) {
            return Err(Error::invalid("extractor hidden widths must be positive"));
        }
        Ok(())
    }

    /// Head attached for a new task with `labels` outputs: feature
    /// extraction trains a small MLP on the frozen trunk output, every
    /// other method a single output layer.
    pub fn new_head(&self, labels: usize, multi_label: bool) -> HeadSpec {
        let base = if multi_label {
            HeadSpec::multi_label(labels)
        } else {
            HeadSpec::classes(labels)
        };
        if self.method == Method::FeatureExtraction {
            base.with_hidden(self.extractor_hidden.clone(), 0.0)
        } else {
            base
        }
    }

    /// Whether the phase-one network this run would produce is the common
    /// warm start of the experiment: same head, no widening and an
    /// unscaled learning rate.
    pub fn shares_warm_start(&self) -> bool {
        self.warm_up
            && !self.method.expands()
            && self.method != Method::FeatureExtraction
            && self.lr_scale == 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub base_lr: f64,
    pub lr_drop_factor: f64,
    /// Joint-phase epoch (0-based) from which the rate is divided by
    /// `lr_drop_factor`.
    pub lr_drop_epoch: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Random image shift in pixels; 0 disables augmentation.
    pub augment_shift: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            warmup_epochs: 2,
            joint_epochs: 4,
            base_lr: 0.01,
            lr_drop_factor: 10.0,
            lr_drop_epoch: None,
            batch_size: 32,
            seed: 0,
            momentum: 0.9,
            weight_decay: 0.0005,
            augment_shift: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base learning rate must be positive"));
        }
        if !(self.lr_drop_factor >= 1.0 && self.lr_drop_factor.is_finite()) {
            return Err(Error::invalid(
                "learning-rate drop factor must be at least 1",
            ));
        }
        Ok(())
    }

    /// Joint-phase learning rate of `epoch` before method scaling.
    pub fn joint_lr(&self, epoch: usize) -> f64 {
        match self.lr_drop_epoch {
            Some(d) if epoch >= d => self.base_lr / self.lr_drop_factor,
            _ => self.base_lr,
        }
    }
}

/// Independent deterministic stream for a `(seed, tags…)` coordinate.
/// Every shuffle, dropout mask and initialization draws from its own
/// stream, so runs that differ only in what they compute see identical
/// randomness.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = seed;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    ChaCha8Rng::seed_from_u64(splitmix(h))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests;
