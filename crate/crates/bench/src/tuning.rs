//! Picks the joint-phase epoch count from new-task validation scores.
//!
//! Only the new task's validation metric is consulted, so the choice never
//! peeks at old-task performance or at the test split.

use std::path::Path;

use lwf_core::data::Split;
use lwf_core::metrics::evaluate;
use lwf_core::strategy::{run_single, SingleTaskProblem};

use crate::config::LoadedConfig;
use crate::error::{BenchError, Result};
use crate::experiment::{initial_network, load_tasks};

#[derive(Clone, Debug, PartialEq)]
pub struct EpochChoice {
    pub epochs: usize,
    /// `(candidate, new-task validation metric)` in candidate order.
    pub scores: Vec<(usize, f64)>,
}

/// Trains the first method entry once per candidate on the first seed and
/// the first two tasks; the best validation score wins, ties going to
/// fewer epochs.
pub fn select_epochs(loaded: &LoadedConfig, candidates: &[usize]) -> Result<EpochChoice> {
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(BenchError::config(
            "epoch candidates must be positive and non-empty",
        ));
    }
    let cfg = &loaded.config;
    let tasks = load_tasks(loaded)?;
    let method = &cfg.methods[0];
    let strategy = method.strategy()?;
    let depth = method.branch_depth.unwrap_or(cfg.network.branch_depth);
    let net0 = initial_network(cfg, &tasks[0], depth)?;
    let (old, new) = (&tasks[0], &tasks[1]);
    let problem = SingleTaskProblem {
        old: vec![old.stage(Split::Val)],
        new: new.stage(Split::Val),
    };
    let mut scores = Vec::with_capacity(candidates.len());
    for &epochs in candidates {
        let mut schedule = cfg.schedule.schedule(cfg.seeds[0]);
        schedule.joint_epochs = epochs;
        let out = run_single(&net0, &problem, &strategy, &schedule, None)?;
        scores.push((epochs, evaluate(&out.network, &new.val, &new.id)?.value));
    }
    let mut best = scores[0];
    for &(e, s) in &scores[1..] {
        if s > best.1 || (s == best.1 && e < best.0) {
            best = (e, s);
        }
    }
    Ok(EpochChoice {
        epochs: best.0,
        scores,
    })
}

/// Copies the config at `source` to `target` with `schedule.joint_epochs`
/// replaced. Comments and layout are not preserved.
pub fn write_tuned_config(source: &Path, target: &Path, epochs: usize) -> Result<()> {
    let text = std::fs::read_to_string(source).map_err(|e| BenchError::io(source, e))?;
    let mut doc: toml::Table = toml::from_str(&text).map_err(|e| BenchError::ConfigSyntax {
        path: source.to_path_buf(),
        source: e,
    })?;
    let schedule = doc
        .entry("schedule")
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let toml::Value::Table(schedule) = schedule else {
        return Err(BenchError::config("`schedule` is not a table"));
    };
    schedule.insert("joint_epochs".into(), toml::Value::Integer(epochs as i64));
    let out = toml::to_string(&doc)
        .map_err(|e| BenchError::config(format!("cannot render tuned config: {e}")))?;
    std::fs::write(target, out).map_err(|e| BenchError::io(target, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuned_config_changes_only_the_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("a.toml");
        let dst = dir.path().join("b.toml");
        let text = "schema_version = 1\nname = \"x\"\nscenario = \"single-task\"\n\n[data]\nkind = \"synth\"\n\n[[tasks]]\nid = \"a\"\n\n[[tasks]]\nid = \"b\"\n\n[schedule]\njoint_epochs = 9\nlr = 0.02\n\n[[methods]]\nmethod = \"lwf\"\n";
        std::fs::write(&src, text).unwrap();
        write_tuned_config(&src, &dst, 3).unwrap();
        let a = LoadedConfig::from_path(&src).unwrap().config;
        let b = LoadedConfig::from_path(&dst).unwrap().config;
        assert_eq!(b.schedule.joint_epochs, 3);
        assert_eq!(b.schedule.lr, 0.02);
        assert_eq!(b.methods, a.methods);
        assert_eq!(b.tasks, a.tasks);
    }
}
