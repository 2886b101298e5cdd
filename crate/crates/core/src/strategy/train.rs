use std::time::Instant;

use rand::seq::SliceRandom;
use rand::RngCore;

use super::objective::{total_loss, Batch, OldTaskMemory};
use super::{stream, Method, Schedule, StrategyConfig};
use crate::autodiff::{assign_gradients, sgd_step, HasParameters, OptimizerState, Tape, Var};
use crate::data::{random_shift, Dataset};
use crate::error::{Error, Result};
use crate::loss::batched::new_task_loss;
use crate::model::{freeze_plan, FreezeKind, Mode, Network, TaskId};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Pretrain,
    WarmUp,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::WarmUp => "warm-up",
            Phase::Joint => "joint-optimize",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::WarmUp => 2,
            Phase::Joint => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub phase: Phase,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<EpochLoss>,
    /// Seconds; informational only.
    pub wall_time: f64,
}

impl TrainReport {
    fn extend(&mut self, other: TrainReport) {
        self.losses.extend(other.losses);
        self.wall_time += other.wall_time;
    }
}

fn shuffled(n: usize, rng: &mut dyn RngCore) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

fn make_batch<S: Scalar>(
    data: &Dataset<S>,
    indices: &[usize],
    shift: usize,
    rng: &mut dyn RngCore,
) -> Result<Batch<S>> {
    let mut inputs = data.inputs().select_rows(indices)?;
    if shift > 0 {
        let (h, w) = match data.sample_shape() {
            [h, w] | [1, h, w] => (*h, *w),
            other => {
                return Err(Error::invalid(format!(
                    "cannot shift samples of shape {other:?}"
                )))
            }
        };
        inputs = random_shift(&inputs, h, w, shift, rng)?;
    }
    Ok(Batch {
        inputs,
        targets: data.targets(indices)?,
        indices: indices.to_vec(),
    })
}

/// Divergence shows up either as a non-finite forward value or a
/// non-finite gradient; both are reported against the epoch.
fn diverged(err: Error, method: &str, phase: Phase, epoch: usize) -> Error {
    match err {
        Error::NonFinite(_) | Error::NonFiniteGradient(_) => Error::Divergence {
            method: method.to_string(),
            phase: phase.name(),
            epoch,
        },
        other => other,
    }
}

fn step<S: Scalar>(
    net: &mut Network<S>,
    opt: &mut OptimizerState<S>,
    loss: impl FnOnce(&mut Tape<S>, &Network<S>) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, net)?;
    let value = tape.value(l).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = tape.backward(l)?;
    assign_gradients(net.parameters_mut(), &grads)?;
    sgd_step(net.parameters_mut(), opt)?;
    Ok(value.as_f64())
}

/// Shared epoch loop: per-epoch shuffle from stream `(phase, epoch, 0, 0)`
/// and per-batch augmentation and dropout from stream
/// `(phase, epoch, 1, batch)`.
#[allow(clippy::too_many_arguments)]
fn run_epochs<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    phase: Phase,
    method: &str,
    epochs: usize,
    schedule: &Schedule,
    mut opt: OptimizerState<S>,
    lr_of: impl Fn(usize) -> f64,
    loss: impl Fn(&mut Tape<S>, &Network<S>, &Batch<S>, Mode<'_>) -> Result<Var>,
) -> Result<Vec<EpochLoss>> {
    let mut out = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        opt.learning_rate = S::lit(lr_of(epoch));
        let order = shuffled(
            data.len(),
            &mut stream(schedule.seed, &[phase.tag(), epoch as u64, 0, 0]),
        );
        let mut total = 0.0;
        let mut count = 0;
        for (b, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let mut rng = stream(schedule.seed, &[phase.tag(), epoch as u64, 1, b as u64]);
            let batch = make_batch(data, chunk, schedule.augment_shift, &mut rng)?;
            let v = step(net, &mut opt, |tape, n| {
                loss(tape, n, &batch, Mode::Train(&mut rng))
            })
            .map_err(|e| diverged(e, method, phase, epoch))?;
            total += v;
            count += 1;
        }
        out.push(EpochLoss {
            phase,
            epoch,
            mean_loss: total / count.max(1) as f64,
        });
    }
    Ok(out)
}

fn optimizer<S: Scalar>(schedule: &Schedule) -> Result<OptimizerState<S>> {
    OptimizerState::new(
        S::lit(schedule.base_lr),
        S::lit(schedule.momentum),
        S::lit(schedule.weight_decay),
    )
}

/// Trains every parameter on one labelled task from its current values.
/// Uses the joint-phase epoch count and learning-rate drop.
pub fn pretrain<S: Scalar>(
    net: &mut Network<S>,
    task: &TaskId,
    data: &Dataset<S>,
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    if schedule.joint_epochs == 0 {
        return Err(Error::invalid("pretraining needs at least one epoch"));
    }
    let labeling = net.head(task)?.spec().labeling();
    net.unfreeze_all();
    let start = Instant::now();
    let losses = run_epochs(
        net,
        data,
        Phase::Pretrain,
        "pretrain",
        schedule.joint_epochs,
        schedule,
        optimizer(schedule)?,
        |e| schedule.joint_lr(e),
        |tape, n, batch, mode| {
            let out = n.forward(tape, &batch.inputs, std::slice::from_ref(task), mode)?;
            new_task_loss(tape, out.probs[0], &batch.targets, labeling)
        },
    )?;
    Ok(TrainReport {
        losses,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Phase one: only the new head trains, on the new-task loss. Old-task
/// terms have no gradient with respect to the new head, so this phase is
/// the same for every method.
pub fn warm_up<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    new_task: &TaskId,
    cfg: &StrategyConfig,
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    let labeling = net.head(new_task)?.spec().labeling();
    freeze_plan(net, FreezeKind::WarmUp, std::slice::from_ref(new_task))?.apply(net)?;
    let fixed_trunk = cfg.method == Method::FeatureExtraction;
    let lr = schedule.base_lr * cfg.lr_scale;
    let start = Instant::now();
    let losses = run_epochs(
        net,
        data,
        Phase::WarmUp,
        cfg.method.name(),
        schedule.warmup_epochs,
        schedule,
        optimizer(schedule)?,
        |_| lr,
        |tape, n, batch, mode| {
            let tasks = std::slice::from_ref(new_task);
            let out = if fixed_trunk {
                n.forward_fixed_trunk(tape, &batch.inputs, tasks, mode)?
            } else {
                n.forward(tape, &batch.inputs, tasks, mode)?
            };
            new_task_loss(tape, out.probs[0], &batch.targets, labeling)
        },
    )?;
    Ok(TrainReport {
        losses,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Phase two: the method's freeze plan and objective for
/// `schedule.joint_epochs` epochs.
pub fn joint_phase<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    new_task: &TaskId,
    memory: &OldTaskMemory<S>,
    cfg: &StrategyConfig,
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    cfg.validate()?;
    if cfg.method == Method::JointTraining {
        return Err(Error::invalid("joint training runs through train_joint"));
    }
    if memory.samples() != data.len() {
        return Err(Error::invalid(format!(
            "memory covers {} samples but the training set has {}",
            memory.samples(),
            data.len()
        )));
    }
    freeze_plan(
        net,
        cfg.method.freeze_kind(),
        std::slice::from_ref(new_task),
    )?
    .apply(net)?;
    let mut opt = optimizer(schedule)?;
    if cfg.shared_lr_scale != 1.0 {
        for p in net.shared_parameters() {
            opt.set_lr_multiplier(p.id(), S::lit(cfg.shared_lr_scale));
        }
    }
    let start = Instant::now();
    let losses = run_epochs(
        net,
        data,
        Phase::Joint,
        cfg.method.name(),
        schedule.joint_epochs,
        schedule,
        opt,
        |e| schedule.joint_lr(e) * cfg.lr_scale,
        |tape, n, batch, mode| total_loss(tape, n, batch, new_task, cfg, memory, mode),
    )?;
    Ok(TrainReport {
        losses,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Warm-up (if enabled) followed by the joint-optimize phase. The new head
/// must already be attached and `memory` recorded on `data` beforehand.
pub fn train_two_phase<S: Scalar>(
    net: &mut Network<S>,
    data: &Dataset<S>,
    new_task: &TaskId,
    memory: &OldTaskMemory<S>,
    cfg: &StrategyConfig,
    schedule: &Schedule,
) -> Result<TrainReport> {
    let warm = if cfg.warm_up {
        schedule.warmup_epochs
    } else {
        0
    };
    if warm + schedule.joint_epochs == 0 {
        return Err(Error::invalid("schedule has no epochs"));
    }
    let mut report = TrainReport::default();
    if warm > 0 {
        report.extend(warm_up(net, data, new_task, cfg, schedule)?);
    }
    report.extend(joint_phase(net, data, new_task, memory, cfg, schedule)?);
    Ok(report)
}

/// Multitask training on real labels of every task.
///
/// Each epoch draws `min_k |D_k|` samples per task without replacement,
/// then takes one batch per task in turn (A, B, A, B, …); each batch only
/// trains through its own task's loss.
pub fn train_joint<S: Scalar>(
    net: &mut Network<S>,
    tasks: &[(TaskId, &Dataset<S>)],
    schedule: &Schedule,
) -> Result<TrainReport> {
    schedule.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("joint training needs at least one task"));
    }
    if schedule.joint_epochs == 0 {
        return Err(Error::invalid("schedule has no epochs"));
    }
    if let Some((t, _)) = tasks.iter().find(|(_, d)| d.is_empty()) {
        return Err(Error::invalid(format!("task {t} has no training samples")));
    }
    let labelings = tasks
        .iter()
        .map(|(t, _)| Ok(net.head(t)?.spec().labeling()))
        .collect::<Result<Vec<_>>>()?;
    freeze_plan(net, FreezeKind::JointTraining, &[])?.apply(net)?;
    let sizes: Vec<usize> = tasks.iter().map(|(_, d)| d.len()).collect();
    let mut opt = optimizer(schedule)?;
    let start = Instant::now();
    let mut losses = Vec::with_capacity(schedule.joint_epochs);
    for epoch in 0..schedule.joint_epochs {
        opt.learning_rate = S::lit(schedule.joint_lr(epoch));
        let (mut total, mut count) = (0.0, 0);
        for (step_no, (i, rows)) in joint_batches(&sizes, schedule.batch_size, schedule.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (task, data) = &tasks[i];
            let mut rng = stream(
                schedule.seed,
                &[Phase::Joint.tag(), epoch as u64, 1, step_no as u64],
            );
            let batch = make_batch(data, &rows, schedule.augment_shift, &mut rng)?;
            let v = step(net, &mut opt, |tape, n| {
                let out = n.forward(
                    tape,
                    &batch.inputs,
                    std::slice::from_ref(task),
                    Mode::Train(&mut rng),
                )?;
                new_task_loss(tape, out.probs[0], &batch.targets, labelings[i])
            })
            .map_err(|e| diverged(e, Method::JointTraining.name(), Phase::Joint, epoch))?;
            total += v;
            count += 1;
        }
        losses.push(EpochLoss {
            phase: Phase::Joint,
            epoch,
            mean_loss: total / count as f64,
        });
    }
    Ok(TrainReport {
        losses,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Batch schedule of [`train_joint`] for one epoch as `(task index, rows)`
/// pairs; exposed for inspection.
pub fn joint_batches(
    sizes: &[usize],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<(usize, Vec<usize>)> {
    let m = sizes.iter().copied().min().unwrap_or(0);
    let draws: Vec<Vec<usize>> = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut order = shuffled(
                n,
                &mut stream(seed, &[Phase::Joint.tag(), epoch as u64, 0, i as u64]),
            );
            order.truncate(m);
            order
        })
        .collect();
    let mut out = Vec::new();
    for b in 0..m.div_ceil(batch_size.max(1)) {
        let lo = b * batch_size;
        let hi = (lo + batch_size).min(m);
        for (i, d) in draws.iter().enumerate() {
            out.push((i, d[lo..hi].to_vec()));
        }
    }
    out
}
