//! Runs every (method, seed) cell of a config.

use std::collections::BTreeMap;
use std::time::Instant;

use lwf_core::data::{
    class_split, dataset_mean, load_idx, normalize_mean_subtract, stratified_holdout, subsample,
    synth_multilabel, synth_tasks, Dataset, MultiLabelSpec, Split, SynthSpec,
};
use lwf_core::metrics::{evaluate, Metric};
use lwf_core::model::{HeadSpec, Network, TaskId};
use lwf_core::strategy::{
    prepare_network, pretrain, run_single, sequential_scenario, stream, warm_up, Method, Schedule,
    SingleTaskProblem, StageTask, StrategyConfig,
};
use rand::RngCore;
use rayon::prelude::*;

use crate::config::{DataKind, ExperimentConfig, LoadedConfig, Scenario};
use crate::error::{BenchError, Result};
use crate::report::{Artifacts, Failure, Record, LAMBDA_MARK};

const NET_TAG: u64 = 20;
const SIZE_TAG: u64 = 21;

/// One task's three splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub id: TaskId,
    pub train: Dataset<f64>,
    pub val: Dataset<f64>,
    pub test: Dataset<f64>,
}

impl TaskData {
    /// The task scored on its `split` part (test unless `Val`).
    pub fn stage(&self, split: Split) -> StageTask<'_, f64> {
        StageTask {
            task: &self.id,
            train: &self.train,
            eval: if split == Split::Val {
                &self.val
            } else {
                &self.test
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunOptions {
    pub seed_offset: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    /// Record measured wall time instead of 0, at the cost of
    /// byte-identical reruns.
    pub wall_time: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            seed_offset: 0,
            jobs: 1,
            wall_time: false,
        }
    }
}

/// Loads the data, splits it into tasks, holds out validation and test
/// parts and normalizes with the first task's training mean.
pub fn load_tasks(loaded: &LoadedConfig) -> Result<Vec<TaskData>> {
    let cfg = &loaded.config;
    let d = &cfg.data;
    let parts: Vec<(TaskId, Dataset<f64>)> = match d.kind {
        DataKind::Idx => {
            let (Some(images), Some(labels)) = (&d.images, &d.labels) else {
                return Err(BenchError::config(
                    "idx data needs `images` and `labels` paths",
                ));
            };
            let all = load_idx(&loaded.resolve(images), &loaded.resolve(labels))?;
            split_by_class(&all, cfg)?
        }
        DataKind::Synth => {
            let s = &d.synth;
            let spec = SynthSpec {
                tasks: cfg.tasks.len(),
                classes_per_task: s.classes_per_task,
                dim: s.dim,
                separation: s.separation,
                similarity: s.similarity,
                per_class: s.per_class,
                seed: s.seed,
            };
            synth_tasks(&spec)?
                .into_iter()
                .zip(&cfg.tasks)
                .map(|((_, ds), t)| (TaskId::new(&t.id), ds))
                .collect()
        }
        DataKind::SynthMultilabel => {
            let s = &d.synth;
            let labels = cfg
                .tasks
                .iter()
                .flat_map(|t| &t.classes)
                .max()
                .map_or(0, |m| *m as usize + 1);
            let all = synth_multilabel(&MultiLabelSpec {
                labels,
                dim: s.dim,
                samples: s.samples,
                positive_rate: s.positive_rate,
                separation: s.separation,
                seed: s.seed,
            })?;
            split_by_class(&all, cfg)?
        }
    };
    let mut tasks = Vec::with_capacity(parts.len());
    for (k, (id, ds)) in parts.into_iter().enumerate() {
        let seed = d.split_seed.wrapping_add(2 * k as u64);
        let (train, held) = stratified_holdout(&ds, d.holdout_fraction, seed, Split::Val)?;
        let (val, test) = stratified_holdout(&held, 0.5, seed + 1, Split::Test)?;
        tasks.push(TaskData {
            id,
            train,
            val,
            test,
        });
    }
    if d.normalize {
        let mean = dataset_mean(&tasks[0].train)?;
        for t in &mut tasks {
            t.train = normalize_mean_subtract(&t.train, &mean)?;
            t.val = normalize_mean_subtract(&t.val, &mean)?;
            t.test = normalize_mean_subtract(&t.test, &mean)?;
        }
    }
    Ok(tasks)
}

fn split_by_class(
    all: &Dataset<f64>,
    cfg: &ExperimentConfig,
) -> Result<Vec<(TaskId, Dataset<f64>)>> {
    let partition: Vec<(TaskId, Vec<u32>)> = cfg
        .tasks
        .iter()
        .map(|t| (TaskId::new(&t.id), t.classes.clone()))
        .collect();
    Ok(class_split(all, &partition)?
        .into_iter()
        .map(|(def, ds)| (def.id, ds))
        .collect())
}

fn head_for(data: &Dataset<f64>) -> HeadSpec {
    if data.is_multi_label() {
        HeadSpec::multi_label(data.label_count())
    } else {
        HeadSpec::classes(data.label_count())
    }
}

/// The network every cell starts from: fresh weights trained on the first
/// task alone.
pub fn initial_network(
    cfg: &ExperimentConfig,
    first: &TaskData,
    branch_depth: usize,
) -> Result<Network<f64>> {
    let spec = cfg.network.spec(first.train.sample_shape(), branch_depth);
    let p = &cfg.pretrain;
    let mut net = Network::new(
        &spec,
        first.id.clone(),
        head_for(&first.train),
        &mut stream(p.seed, &[NET_TAG]),
    )?;
    let schedule = Schedule {
        joint_epochs: p.epochs,
        base_lr: p.lr,
        batch_size: p.batch_size,
        seed: p.seed,
        ..cfg.schedule.schedule(p.seed)
    };
    pretrain(&mut net, &first.id, &first.train, &schedule)?;
    Ok(net)
}

/// A run configuration within the experiment: one method entry, possibly
/// specialized to a sweep value or a new-task training fraction.
#[derive(Clone, Debug)]
struct Variant {
    label: String,
    strategy: StrategyConfig,
    branch_depth: usize,
    /// Index into `fractions`, or `None` for the full new-task set.
    fraction: Option<usize>,
}

fn variants(cfg: &ExperimentConfig) -> Result<Vec<Variant>> {
    let mut out = Vec::new();
    for m in &cfg.methods {
        let base = Variant {
            label: m.label().to_string(),
            strategy: m.strategy()?,
            branch_depth: m.branch_depth.unwrap_or(cfg.network.branch_depth),
            fraction: None,
        };
        match cfg.scenario {
            Scenario::LambdaSweep => {
                let mut lambdas = cfg.sweep.lambdas.clone();
                lambdas.sort_by(f64::total_cmp);
                for l in lambdas {
                    let mut v = base.clone();
                    v.label = format!("{}{LAMBDA_MARK}{l}", base.label);
                    v.strategy.lambda_o = l;
                    out.push(v);
                }
            }
            Scenario::DatasetSize => {
                for (i, f) in cfg.data.fractions.iter().enumerate() {
                    let mut v = base.clone();
                    v.label = format!("{}@size={f}", base.label);
                    v.fraction = Some(i);
                    out.push(v);
                }
            }
            _ => out.push(base),
        }
    }
    Ok(out)
}

/// Shared inputs of every cell.
struct Context<'a> {
    cfg: &'a ExperimentConfig,
    tasks: &'a [TaskData],
    /// Subsampled new-task training sets, one per fraction.
    reduced: Vec<TaskData>,
    nets: BTreeMap<usize, Network<f64>>,
    opts: &'a RunOptions,
}

impl Context<'_> {
    fn new_task(&self, fraction: Option<usize>) -> &TaskData {
        fraction.map_or(&self.tasks[1], |i| &self.reduced[i])
    }

    fn schedule(&self, seed: u64) -> Schedule {
        self.cfg.schedule.schedule(seed)
    }

    fn record(
        &self,
        method: &str,
        task: &TaskId,
        stage: usize,
        seed: u64,
        m: &Metric,
        wall: f64,
    ) -> Record {
        Record {
            scenario: self.cfg.scenario.name().to_string(),
            method: method.to_string(),
            task_id: task.to_string(),
            stage,
            seed,
            metric_kind: m.kind.name().to_string(),
            value: m.value,
            wall_time_s: if self.opts.wall_time { wall } else { 0.0 },
        }
    }
}

/// Records of one finished cell.
#[derive(Default)]
struct CellOutput {
    test: Vec<Record>,
    val: Vec<Record>,
}

type WarmKey = (usize, Option<usize>, u64);

/// Phase-one networks shared by every method whose warm start is the
/// common one, keyed by (branch depth, fraction, seed).
fn warm_starts(
    ctx: &Context<'_>,
    cells: &[(Variant, u64)],
) -> BTreeMap<WarmKey, std::result::Result<Network<f64>, String>> {
    let mut keys: Vec<WarmKey> = cells
        .iter()
        .filter(|(v, _)| v.strategy.shares_warm_start() && ctx.cfg.scenario != Scenario::Sequential)
        .map(|(v, seed)| (v.branch_depth, v.fraction, *seed))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.into_par_iter()
        .map(|key| {
            let (depth, fraction, seed) = key;
            let cfg = StrategyConfig::new(Method::FineTune);
            let new = ctx.new_task(fraction).stage(Split::Test);
            let sched = ctx.schedule(seed);
            let warm =
                prepare_network(&ctx.nets[&depth], &new, &cfg, seed, 1).and_then(|(mut net, _)| {
                    warm_up(&mut net, new.train, new.task, &cfg, &sched)?;
                    Ok(net)
                });
            (key, warm.map_err(|e| e.to_string()))
        })
        .collect()
}

fn run_single_cell(
    ctx: &Context<'_>,
    v: &Variant,
    seed: u64,
    warm: Option<&Network<f64>>,
) -> lwf_core::error::Result<CellOutput> {
    let net0 = &ctx.nets[&v.branch_depth];
    let old = &ctx.tasks[0];
    let new = ctx.new_task(v.fraction);
    let problem = SingleTaskProblem {
        old: vec![old.stage(Split::Test)],
        new: new.stage(Split::Test),
    };
    let start = Instant::now();
    let out = run_single(net0, &problem, &v.strategy, &ctx.schedule(seed), warm)?;
    let wall = start.elapsed().as_secs_f64();
    let mut cell = CellOutput::default();
    for (split, into) in [(Split::Test, &mut cell.test), (Split::Val, &mut cell.val)] {
        let old_eval = old.stage(split).eval;
        into.push(ctx.record(
            &v.label,
            &old.id,
            0,
            seed,
            &evaluate(net0, old_eval, &old.id)?,
            0.0,
        ));
        into.push(ctx.record(
            &v.label,
            &old.id,
            1,
            seed,
            &evaluate(&out.network, old_eval, &old.id)?,
            wall,
        ));
        let new_eval = new.stage(split).eval;
        into.push(ctx.record(
            &v.label,
            &new.id,
            1,
            seed,
            &evaluate(&out.network, new_eval, &new.id)?,
            wall,
        ));
    }
    Ok(cell)
}

fn run_sequential_cell(
    ctx: &Context<'_>,
    v: &Variant,
    seed: u64,
) -> lwf_core::error::Result<CellOutput> {
    let net0 = &ctx.nets[&v.branch_depth];
    let base = [ctx.tasks[0].stage(Split::Test)];
    let seq: Vec<StageTask<'_, f64>> = ctx.tasks[1..]
        .iter()
        .map(|t| t.stage(Split::Test))
        .collect();
    let state = sequential_scenario(net0, &base, &seq, &v.strategy, &ctx.schedule(seed))?;
    let mut cell = CellOutput::default();
    for r in &state.records {
        let m = Metric {
            kind: r.kind,
            value: r.value,
        };
        cell.test
            .push(ctx.record(&v.label, &r.task, r.stage, seed, &m, r.wall_time));
    }
    // validation scores of the final network only
    let last = ctx.tasks.len() - 1;
    let wall = state.records.last().map_or(0.0, |r| r.wall_time);
    for t in ctx.tasks {
        let m = evaluate(&state.network, &t.val, &t.id)?;
        cell.val
            .push(ctx.record(&v.label, &t.id, last, seed, &m, wall));
    }
    Ok(cell)
}

/// Everything a run produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub artifacts: Artifacts,
}

impl Outcome {
    pub fn succeeded(&self) -> bool {
        self.artifacts.failures.is_empty()
    }
}

/// Runs all cells of the config.
///
/// Initial networks and shared warm starts are built first; then every
/// (variant, seed) cell runs independently. Results are assembled in
/// config order whatever the thread count, so reports do not depend on
/// `jobs`. A failing cell is reported and the rest still run.
pub fn run_experiment(loaded: &LoadedConfig, opts: &RunOptions) -> Result<Outcome> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| BenchError::config(format!("cannot start {} workers: {e}", opts.jobs)))?;
    pool.install(|| run_in_pool(loaded, opts))
}

fn run_in_pool(loaded: &LoadedConfig, opts: &RunOptions) -> Result<Outcome> {
    let cfg = &loaded.config;
    let tasks = load_tasks(loaded)?;
    let vars = variants(cfg)?;
    let reduced = cfg
        .data
        .fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let t = &tasks[1];
            let seed = stream(cfg.data.split_seed, &[SIZE_TAG, i as u64]).next_u64();
            Ok(TaskData {
                train: subsample(&t.train, f, seed)?,
                ..t.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut depths: Vec<usize> = vars.iter().map(|v| v.branch_depth).collect();
    depths.sort_unstable();
    depths.dedup();
    let nets = depths
        .into_par_iter()
        .map(|d| Ok((d, initial_network(cfg, &tasks[0], d)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let ctx = Context {
        cfg,
        tasks: &tasks,
        reduced,
        nets,
        opts,
    };
    let seeds: Vec<u64> = cfg
        .seeds
        .iter()
        .map(|s| s.wrapping_add(opts.seed_offset))
        .collect();
    let cells: Vec<(Variant, u64)> = vars
        .iter()
        .flat_map(|v| seeds.iter().map(move |&s| (v.clone(), s)))
        .collect();
    let warm = warm_starts(&ctx, &cells);
    let results: Vec<std::result::Result<CellOutput, String>> = cells
        .par_iter()
        .map(|(v, seed)| {
            if cfg.scenario == Scenario::Sequential {
                return run_sequential_cell(&ctx, v, *seed).map_err(|e| e.to_string());
            }
            let w = match warm.get(&(v.branch_depth, v.fraction, *seed)) {
                Some(Ok(net)) if v.strategy.shares_warm_start() => Some(net),
                Some(Err(e)) if v.strategy.shares_warm_start() => {
                    return Err(format!("warm start: {e}"))
                }
                _ => None,
            };
            run_single_cell(&ctx, v, *seed, w).map_err(|e| e.to_string())
        })
        .collect();
    let mut artifacts = Artifacts {
        name: cfg.name.clone(),
        scenario: cfg.scenario.name().to_string(),
        config_fingerprint: loaded.fingerprint.clone(),
        reference: cfg.report.reference.clone(),
        ..Artifacts::default()
    };
    for ((v, seed), r) in cells.iter().zip(results) {
        match r {
            Ok(c) => {
                artifacts.records.extend(c.test);
                artifacts.val_records.extend(c.val);
            }
            Err(error) => artifacts.failures.push(Failure {
                method: v.label.clone(),
                seed: *seed,
                error,
            }),
        }
    }
    Ok(Outcome { artifacts })
}
