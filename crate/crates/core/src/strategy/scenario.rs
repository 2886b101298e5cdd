use std::collections::BTreeSet;

use rand::RngCore;

use super::objective::{remember, OldTaskMemory};
use super::train::{joint_phase, train_joint, train_two_phase, warm_up, TrainReport};
use super::{stream, Method, Schedule, StrategyConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metric, MetricsRecord};
use crate::model::{expand_network, Network, RecordedResponses, TaskId};
use crate::scalar::Scalar;

const HEAD_TAG: u64 = 10;
const EXPAND_TAG: u64 = 11;
const STAGE_TAG: u64 = 12;

/// A task with its training set and the held-out set it is scored on.
#[derive(Clone, Copy, Debug)]
pub struct StageTask<'a, S> {
    pub task: &'a TaskId,
    pub train: &'a Dataset<S>,
    pub eval: &'a Dataset<S>,
}

/// Adding one task to a network that already knows `old`.
#[derive(Clone, Debug)]
pub struct SingleTaskProblem<'a, S> {
    pub old: Vec<StageTask<'a, S>>,
    pub new: StageTask<'a, S>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome<S> {
    pub network: Network<S>,
    pub report: TrainReport,
    /// Old tasks in the problem's order, then the new task.
    pub metrics: Vec<(TaskId, Metric)>,
}

/// Records the memory on the new-task training images, then attaches the
/// method's head for the new task (and widens the trunk for expansion
/// methods). Head and widening draws come from streams keyed by `stage`.
pub fn prepare_network<S: Scalar>(
    net0: &Network<S>,
    new: &StageTask<'_, S>,
    cfg: &StrategyConfig,
    seed: u64,
    stage: usize,
) -> Result<(Network<S>, OldTaskMemory<S>)> {
    let memory = remember(net0, new.train.inputs())?;
    let mut net = net0.clone();
    let head = cfg.new_head(new.train.label_count(), new.train.is_multi_label());
    net.add_head(
        new.task.clone(),
        head,
        &mut stream(seed, &[HEAD_TAG, stage as u64]),
    )?;
    if cfg.method.expands() {
        expand_network(
            &mut net,
            &cfg.expansion,
            new.task,
            &mut stream(seed, &[EXPAND_TAG, stage as u64]),
        )?;
    }
    Ok((net, memory))
}

fn score<S: Scalar>(net: &Network<S>, tasks: &[StageTask<'_, S>]) -> Result<Vec<(TaskId, Metric)>> {
    tasks
        .iter()
        .map(|t| Ok((t.task.clone(), evaluate(net, t.eval, t.task)?)))
        .collect()
}

/// Trains one method on one new task starting from `net0` and scores all
/// tasks.
///
/// `warm` is an already warmed-up network for this problem and seed; it is
/// used in place of phase one when the configuration shares the common
/// warm start, and is otherwise ignored.
pub fn run_single<S: Scalar>(
    net0: &Network<S>,
    problem: &SingleTaskProblem<'_, S>,
    cfg: &StrategyConfig,
    schedule: &Schedule,
    warm: Option<&Network<S>>,
) -> Result<RunOutcome<S>> {
    cfg.validate()?;
    let new = &problem.new;
    let (mut net, memory) = prepare_network(net0, new, cfg, schedule.seed, 1)?;
    let mut report = TrainReport::default();
    let reuse = warm.filter(|_| cfg.shares_warm_start());
    if cfg.method == Method::JointTraining {
        match reuse {
            Some(w) => net = w.clone(),
            None if cfg.warm_up && schedule.warmup_epochs > 0 => {
                report = warm_up(&mut net, new.train, new.task, cfg, schedule)?;
            }
            None => {}
        }
        let mut tasks: Vec<(TaskId, &Dataset<S>)> = problem
            .old
            .iter()
            .map(|t| (t.task.clone(), t.train))
            .collect();
        tasks.push((new.task.clone(), new.train));
        let r = train_joint(&mut net, &tasks, schedule)?;
        report.losses.extend(r.losses);
        report.wall_time += r.wall_time;
    } else if let Some(w) = reuse {
        net = w.clone();
        report = joint_phase(&mut net, new.train, new.task, &memory, cfg, schedule)?;
    } else {
        report = train_two_phase(&mut net, new.train, new.task, &memory, cfg, schedule)?;
    }
    let mut all = problem.old.clone();
    all.push(*new);
    Ok(RunOutcome {
        metrics: score(&net, &all)?,
        network: net,
        report,
    })
}

/// Result of adding tasks one after another.
#[derive(Clone, Debug)]
pub struct ScenarioState<S> {
    pub network: Network<S>,
    pub task_order: Vec<TaskId>,
    /// Responses recorded at the start of each added stage (stage 1
    /// first). Empty for methods that do not use them.
    pub responses: Vec<RecordedResponses<S>>,
    /// Network fingerprint at the start of each added stage.
    pub stage_fingerprints: Vec<u64>,
    pub records: Vec<MetricsRecord>,
}

fn stage_schedule(schedule: &Schedule, stage: usize) -> Schedule {
    let mut s = schedule.clone();
    s.seed = stream(schedule.seed, &[STAGE_TAG, stage as u64]).next_u64();
    s
}

/// Adds `sequence` to a network that already knows `base`, one stage per
/// task. Stage 0 is the initial network.
///
/// At each stage the responses of every existing head are recorded on the
/// incoming task's images before its head is attached, and every task seen
/// so far is scored after training. Feature extraction and joint training
/// are not cumulative: they are built once with all tasks and reported at
/// the final stage only.
pub fn sequential_scenario<S: Scalar>(
    net0: &Network<S>,
    base: &[StageTask<'_, S>],
    sequence: &[StageTask<'_, S>],
    cfg: &StrategyConfig,
    schedule: &Schedule,
) -> Result<ScenarioState<S>> {
    cfg.validate()?;
    if base.is_empty() {
        return Err(Error::invalid(
            "the initial network needs at least one task",
        ));
    }
    let mut seen = BTreeSet::new();
    for t in base.iter().chain(sequence) {
        if !seen.insert(t.task.clone()) {
            return Err(Error::DuplicateTask(t.task.to_string()));
        }
    }
    for t in base {
        net0.head(t.task)?;
    }
    for t in sequence {
        if net0.has_task(t.task) {
            return Err(Error::DuplicateTask(t.task.to_string()));
        }
    }
    let method = cfg.method.name().to_string();
    let cumulative = !matches!(
        cfg.method,
        Method::FeatureExtraction | Method::JointTraining
    );
    let final_stage = sequence.len();
    let mut net = net0.clone();
    let mut order: Vec<TaskId> = base.iter().map(|t| t.task.clone()).collect();
    let mut responses = Vec::new();
    let mut fingerprints = Vec::new();
    let mut records = Vec::new();
    let mut wall = 0.0;
    let mut emit =
        |net: &Network<S>, tasks: &[StageTask<'_, S>], stage: usize, wall: f64| -> Result<()> {
            for ((task, m), t) in score(net, tasks)?.into_iter().zip(tasks) {
                records.push(MetricsRecord {
                    method: method.clone(),
                    task,
                    stage,
                    seed: schedule.seed,
                    kind: m.kind,
                    value: m.value,
                    split: t.eval.split(),
                    wall_time: wall,
                });
            }
            Ok(())
        };
    if cumulative {
        emit(&net, base, 0, 0.0)?;
    }

    let mut known: Vec<StageTask<'_, S>> = base.to_vec();
    for (i, new) in sequence.iter().enumerate() {
        let stage = i + 1;
        let sched = stage_schedule(schedule, stage);
        fingerprints.push(net.fingerprint());
        if cfg.method == Method::JointTraining {
            let mut head_cfg = cfg.clone();
            head_cfg.method = Method::FineTune;
            let (mut next, _) = prepare_network(&net, new, &head_cfg, sched.seed, stage)?;
            if cfg.warm_up && sched.warmup_epochs > 0 {
                wall += warm_up(&mut next, new.train, new.task, cfg, &sched)?.wall_time;
            }
            net = next;
        } else {
            let (mut next, memory) = prepare_network(&net, new, cfg, sched.seed, stage)?;
            if let Some(r) = &memory.responses {
                if cfg.method.uses_responses() {
                    responses.push(r.clone());
                }
            }
            wall +=
                train_two_phase(&mut next, new.train, new.task, &memory, cfg, &sched)?.wall_time;
            net = next;
        }
        order.push(new.task.clone());
        known.push(*new);
        if cumulative {
            emit(&net, &known, stage, wall)?;
        }
    }
    if cfg.method == Method::JointTraining {
        let tasks: Vec<(TaskId, &Dataset<S>)> =
            known.iter().map(|t| (t.task.clone(), t.train)).collect();
        wall +=
            train_joint(&mut net, &tasks, &stage_schedule(schedule, final_stage + 1))?.wall_time;
    }
    if !cumulative {
        emit(&net, &known, final_stage, wall)?;
    }
    Ok(ScenarioState {
        network: net,
        task_order: order,
        responses,
        stage_fingerprints: fingerprints,
        records,
    })
}

/// One old-task weight of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub old: Vec<(TaskId, Metric)>,
    pub new: Metric,
}

impl SweepRow {
    /// Mean metric over the old tasks.
    pub fn old_mean(&self) -> f64 {
        self.old.iter().map(|(_, m)| m.value).sum::<f64>() / self.old.len().max(1) as f64
    }
}

/// Runs the configured method once per `λ_o`, each time from `net0`, and
/// returns rows sorted by `λ_o`.
pub fn lambda_sweep<S: Scalar>(
    net0: &Network<S>,
    problem: &SingleTaskProblem<'_, S>,
    lambdas: &[f64],
    cfg: &StrategyConfig,
    schedule: &Schedule,
    warm: Option<&Network<S>>,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() {
        return Err(Error::invalid("lambda sweep needs at least one value"));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::invalid(format!(
            "sweep values must be positive, got {l}"
        )));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .into_iter()
        .map(|lambda| {
            let mut c = cfg.clone();
            c.lambda_o = lambda;
            let mut out = run_single(net0, problem, &c, schedule, warm)?;
            let new = out.metrics.pop().expect("new task is scored").1;
            Ok(SweepRow {
                lambda,
                old: out.metrics,
                new,
            })
        })
        .collect()
}
