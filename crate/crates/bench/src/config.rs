//! Experiment configuration files.
//!
//! A config is a TOML document with `schema_version = 1`. Paths inside it
//! are resolved against the directory of the config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lwf_core::loss::ResponseLossKind;
use lwf_core::model::{ConvSpec, ExpansionSpec, NetworkSpec};
use lwf_core::strategy::{Method, Schedule, StrategyConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    SingleTask,
    Sequential,
    DatasetSize,
    LambdaSweep,
    WarmupAblation,
    ResponseLossCompare,
    BranchDepthCompare,
    ExpansionCompare,
    LoweredLrCompare,
    WeightAnchorCompare,
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::SingleTask,
        Scenario::Sequential,
        Scenario::DatasetSize,
        Scenario::LambdaSweep,
        Scenario::WarmupAblation,
        Scenario::ResponseLossCompare,
        Scenario::BranchDepthCompare,
        Scenario::ExpansionCompare,
        Scenario::LoweredLrCompare,
        Scenario::WeightAnchorCompare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SingleTask => "single-task",
            Scenario::Sequential => "sequential",
            Scenario::DatasetSize => "dataset-size",
            Scenario::LambdaSweep => "lambda-sweep",
            Scenario::WarmupAblation => "warmup-ablation",
            Scenario::ResponseLossCompare => "response-loss-compare",
            Scenario::BranchDepthCompare => "branch-depth-compare",
            Scenario::ExpansionCompare => "expansion-compare",
            Scenario::LoweredLrCompare => "lowered-lr-compare",
            Scenario::WeightAnchorCompare => "weight-anchor-compare",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| BenchError::config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// An IDX image/label pair split into tasks by class.
    Idx,
    /// Gaussian-cluster tasks, one per `[[tasks]]` entry.
    Synth,
    /// One multi-label set whose label columns are split into tasks.
    SynthMultilabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Fraction of every task held out; half of it is validation, half test.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Subtract the first task's training mean from every sample.
    #[serde(default = "yes")]
    pub normalize: bool,
    /// New-task training fractions of a dataset-size scenario.
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes_per_task: usize,
    pub dim: usize,
    pub separation: f64,
    pub similarity: f64,
    pub per_class: usize,
    pub samples: usize,
    pub positive_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes_per_task: 3,
            dim: 8,
            separation: 3.0,
            similarity: 0.5,
            per_class: 40,
            samples: 300,
            positive_rate: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub id: String,
    /// Source classes (or label columns) owned by the task.
    #[serde(default)]
    pub classes: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    pub lower_blocks: usize,
    pub dropout: f64,
    pub branch_depth: usize,
    pub conv: Option<ConvConfig>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let d = NetworkSpec::default();
        NetworkConfig {
            hidden: d.hidden,
            lower_blocks: d.lower_blocks,
            dropout: d.dropout,
            branch_depth: d.branch_depth,
            conv: None,
        }
    }
}

impl NetworkConfig {
    /// Spec for samples of `sample_shape`; a conv stem expects a single
    /// channel image.
    pub fn spec(&self, sample_shape: &[usize], branch_depth: usize) -> NetworkSpec {
        let input_shape = match (self.conv, sample_shape) {
            (Some(_), [h, w]) => vec![1, *h, *w],
            (Some(_), shape) => shape.to_vec(),
            (None, shape) => vec![shape.iter().product()],
        };
        NetworkSpec {
            input_shape,
            conv: self.conv.map(|c| ConvSpec {
                channels: c.channels,
                kernel: c.kernel,
            }),
            hidden: self.hidden.clone(),
            lower_blocks: self.lower_blocks,
            dropout: self.dropout,
            branch_depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds the initial network and its training; shared by every cell.
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 4,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub lr: f64,
    pub lr_drop_factor: f64,
    pub lr_drop_epoch: Option<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment_shift: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let d = Schedule::default();
        ScheduleConfig {
            warmup_epochs: d.warmup_epochs,
            joint_epochs: d.joint_epochs,
            lr: d.base_lr,
            lr_drop_factor: d.lr_drop_factor,
            lr_drop_epoch: d.lr_drop_epoch,
            batch_size: d.batch_size,
            momentum: d.momentum,
            weight_decay: d.weight_decay,
            augment_shift: d.augment_shift,
        }
    }
}

impl ScheduleConfig {
    pub fn schedule(&self, seed: u64) -> Schedule {
        Schedule {
            warmup_epochs: self.warmup_epochs,
            joint_epochs: self.joint_epochs,
            base_lr: self.lr,
            lr_drop_factor: self.lr_drop_factor,
            lr_drop_epoch: self.lr_drop_epoch,
            batch_size: self.batch_size,
            seed,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            augment_shift: self.augment_shift,
        }
    }
}

/// One `[[methods]]` entry. Unset fields take the method's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodConfig {
    pub method: String,
    /// Name used in reports; defaults to the method name.
    pub label: Option<String>,
    pub lambda_o: Option<f64>,
    pub lambda_i: Option<f64>,
    pub response_loss: Option<String>,
    pub warm_up: Option<bool>,
    pub lr_scale: Option<f64>,
    pub shared_lr_scale: Option<f64>,
    pub extractor_hidden: Option<Vec<usize>>,
    pub expansion_nodes: Option<usize>,
    pub expansion_layers: Option<usize>,
    /// Overrides `network.branch_depth`; the initial network is trained
    /// once per distinct depth.
    pub branch_depth: Option<usize>,
}

impl MethodConfig {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.method)
    }

    pub fn strategy(&self) -> Result<StrategyConfig> {
        let method: Method = self.method.parse()?;
        let mut c = StrategyConfig::new(method);
        if let Some(v) = self.lambda_o {
            c.lambda_o = v;
        }
        if let Some(v) = self.lambda_i {
            c.lambda_i = v;
        }
        if let Some(v) = &self.response_loss {
            c.response_loss = v.parse::<ResponseLossKind>()?;
        }
        if let Some(v) = self.warm_up {
            c.warm_up = v;
        }
        if let Some(v) = self.lr_scale {
            c.lr_scale = v;
        }
        if let Some(v) = self.shared_lr_scale {
            c.shared_lr_scale = v;
        }
        if let Some(v) = &self.extractor_hidden {
            c.extractor_hidden = v.clone();
        }
        c.expansion = ExpansionSpec {
            nodes_per_layer: self.expansion_nodes.unwrap_or(c.expansion.nodes_per_layer),
            layers_from_top: self.expansion_layers.unwrap_or(c.expansion.layers_from_top),
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// Label every delta is taken against.
    #[serde(default = "default_reference")]
    pub reference: String,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            reference: default_reference(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub scenario: Scenario,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub tasks: Vec<TaskConfig>,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

fn default_holdout() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_reference() -> String {
    "lwf".into()
}

/// A parsed config together with the bytes it came from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
    pub fingerprint: String,
}

impl LoadedConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| BenchError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_bytes(&bytes, base).map_err(|e| match e {
            BenchError::ConfigSyntax { source, .. } => BenchError::ConfigSyntax {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8], base_dir: PathBuf) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| BenchError::config(format!("config is not UTF-8: {e}")))?;
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|source| BenchError::ConfigSyntax {
                path: PathBuf::from("<config>"),
                source,
            })?;
        config.validate()?;
        Ok(LoadedConfig {
            config,
            base_dir,
            fingerprint: fingerprint(bytes),
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

/// Hex SHA-256 of the config bytes.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(BenchError::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::config("at least one seed is required"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(BenchError::config("seeds must be distinct"));
        }
        let min_tasks = if self.scenario == Scenario::Sequential {
            3
        } else {
            2
        };
        if self.tasks.len() < min_tasks {
            return Err(BenchError::config(format!(
                "{} needs at least {min_tasks} tasks",
                self.scenario
            )));
        }
        if self.scenario != Scenario::Sequential && self.tasks.len() != 2 {
            return Err(BenchError::config(format!(
                "{} uses exactly one old and one new task",
                self.scenario
            )));
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() {
            return Err(BenchError::config("task ids must be distinct"));
        }
        if self.data.kind != DataKind::Synth && self.tasks.iter().any(|t| t.classes.is_empty()) {
            return Err(BenchError::config("every task needs its classes"));
        }
        if self.data.kind == DataKind::Idx
            && (self.data.images.is_none() || self.data.labels.is_none())
        {
            return Err(BenchError::config(
                "idx data needs `images` and `labels` paths",
            ));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(BenchError::config("holdout_fraction must be in (0, 1)"));
        }
        if self.pretrain.epochs == 0 {
            return Err(BenchError::config("pretraining needs at least one epoch"));
        }
        if self.methods.is_empty() {
            return Err(BenchError::config("at least one method is required"));
        }
        let mut labels: Vec<&str> = self.methods.iter().map(MethodConfig::label).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != self.methods.len() {
            return Err(BenchError::config("method labels must be distinct"));
        }
        for m in &self.methods {
            m.strategy()
                .map_err(|e| BenchError::config(format!("method `{}`: {e}", m.label())))?;
            if m.label().contains(['@', ',', '"', '\n']) {
                return Err(BenchError::config(format!(
                    "label `{}` contains a reserved character",
                    m.label()
                )));
            }
        }
        self.schedule.schedule(0).validate()?;
        match self.scenario {
            Scenario::LambdaSweep => {
                if self.sweep.lambdas.is_empty() {
                    return Err(BenchError::config("lambda-sweep needs `sweep.lambdas`"));
                }
                if self
                    .sweep
                    .lambdas
                    .iter()
                    .any(|l| !(*l > 0.0 && l.is_finite()))
                {
                    return Err(BenchError::config("sweep values must be positive"));
                }
            }
            Scenario::DatasetSize => {
                if self.data.fractions.is_empty() {
                    return Err(BenchError::config("dataset-size needs `data.fractions`"));
                }
                if self.data.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                    return Err(BenchError::config("fractions must be in (0, 1]"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
name = "t"
scenario = "single-task"

[data]
kind = "synth"

[[tasks]]
id = "a"

[[tasks]]
id = "b"

[[methods]]
method = "lwf"

[[methods]]
method = "fine-tune"
warm_up = false
label = "fine-tune-cold"
"#;

    fn parse(text: &str) -> Result<LoadedConfig> {
        LoadedConfig::from_bytes(text.as_bytes(), PathBuf::new())
    }

    #[test]
    fn defaults_fill_in() {
        let c = parse(MINIMAL).unwrap().config;
        assert_eq!(c.seeds, vec![0, 1, 2]);
        assert_eq!(c.data.holdout_fraction, 0.2);
        assert_eq!(c.methods[1].label(), "fine-tune-cold");
        assert!(!c.methods[1].strategy().unwrap().warm_up);
        assert_eq!(
            c.methods[0].strategy().unwrap(),
            StrategyConfig::new(Method::Lwf)
        );
        assert_eq!(c.report.reference, "lwf");
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            MINIMAL.replace("schema_version = 1", "schema_version = 2"),
            MINIMAL.replace(
                "scenario = \"single-task\"",
                "scenario = \"single-task\"\nseeds = []",
            ),
            MINIMAL.replace("method = \"lwf\"", "method = \"lwf2\""),
            MINIMAL.replace("label = \"fine-tune-cold\"", "label = \"lwf\""),
            MINIMAL.replace("single-task", "lambda-sweep"),
            MINIMAL.replace("single-task", "sequential"),
            MINIMAL.replace("kind = \"synth\"", "kind = \"idx\""),
            MINIMAL.replace("[data]", "[data]\nsurprise = 1"),
        ];
        for text in bad {
            assert!(parse(&text).is_err(), "accepted:\n{text}");
        }
    }

    #[test]
    fn fingerprint_tracks_bytes() {
        let a = parse(MINIMAL).unwrap().fingerprint;
        assert_eq!(a, parse(MINIMAL).unwrap().fingerprint);
        assert_ne!(a, parse(&format!("{MINIMAL}\n")).unwrap().fingerprint);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
    }
}
