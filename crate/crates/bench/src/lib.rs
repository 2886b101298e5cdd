//! Experiment configs, the multi-seed runner and report files.

pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod tuning;

pub use config::{ExperimentConfig, LoadedConfig, Scenario};
pub use error::{BenchError, Result};
pub use experiment::{run_experiment, Outcome, RunOptions};
pub use report::{Artifacts, Record};
