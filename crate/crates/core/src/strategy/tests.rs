use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tape;
use crate::data::{stratified_holdout, synth_tasks, Dataset, Split, SynthSpec};
use crate::error::Error;
use crate::loss::batched::{new_task_loss, response_loss};
use crate::loss::Labeling;
use crate::model::{fingerprint_parameters, HeadSpec, Mode, Network, NetworkSpec, Segment, TaskId};

struct Fixture {
    tasks: Vec<TaskId>,
    train: Vec<Dataset<f64>>,
    test: Vec<Dataset<f64>>,
    net0: Network<f64>,
}

fn schedule() -> Schedule {
    Schedule {
        warmup_epochs: 2,
        joint_epochs: 3,
        base_lr: 0.05,
        batch_size: 16,
        seed: 5,
        ..Schedule::default()
    }
}

/// Three 3-class Gaussian tasks and a network pretrained on the first.
fn fixture() -> Fixture {
    let spec = SynthSpec {
        tasks: 3,
        classes_per_task: 3,
        dim: 6,
        separation: 3.0,
        similarity: 0.5,
        per_class: 30,
        seed: 11,
    };
    let mut tasks = Vec::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (def, ds) in synth_tasks::<f64>(&spec).unwrap() {
        let (tr, te) = stratified_holdout(&ds, 0.2, 3, Split::Test).unwrap();
        tasks.push(def.id);
        train.push(tr);
        test.push(te);
    }
    let net_spec = NetworkSpec {
        input_shape: vec![6],
        hidden: vec![16, 12],
        lower_blocks: 1,
        dropout: 0.2,
        ..NetworkSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net0 =
        Network::new(&net_spec, tasks[0].clone(), HeadSpec::classes(3), &mut rng).unwrap();
    pretrain(&mut net0, &tasks[0], &train[0], &schedule()).unwrap();
    Fixture {
        tasks,
        train,
        test,
        net0,
    }
}

impl Fixture {
    fn stage(&self, i: usize) -> StageTask<'_, f64> {
        StageTask {
            task: &self.tasks[i],
            train: &self.train[i],
            eval: &self.test[i],
        }
    }

    fn problem(&self) -> SingleTaskProblem<'_, f64> {
        SingleTaskProblem {
            old: vec![self.stage(0)],
            new: self.stage(1),
        }
    }
}

fn segment_print(net: &Network<f64>, seg: &Segment) -> u64 {
    fingerprint_parameters(net.segment_parameters(seg).unwrap())
}

fn trunk_print(net: &Network<f64>) -> u64 {
    fingerprint_parameters(net.shared_parameters())
}

fn batch_of(data: &Dataset<f64>, idx: &[usize]) -> Batch<f64> {
    Batch {
        inputs: data.inputs().select_rows(idx).unwrap(),
        targets: data.targets(idx).unwrap(),
        indices: idx.to_vec(),
    }
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert!("lwf2".parse::<Method>().is_err());
    let c = StrategyConfig::new(Method::Lwf);
    assert_eq!(c.lambda_o, 1.0);
    assert_eq!(c.lambda_i, 0.2);
    assert_eq!(StrategyConfig::new(Method::FeatureExtraction).lr_scale, 5.0);
}

#[test]
fn objective_is_additive() {
    let f = fixture();
    let (net, memory) = prepare_network(
        &f.net0,
        &f.stage(1),
        &StrategyConfig::new(Method::Lwf),
        0,
        1,
    )
    .unwrap();
    let idx = [0, 3, 7, 9];
    let batch = batch_of(&f.train[1], &idx);
    let new = &f.tasks[1];
    let old = &f.tasks[0];

    // independent evaluation of both terms on the same forward pass
    let mut tape = Tape::new();
    let out = net
        .forward(
            &mut tape,
            &batch.inputs,
            &[new.clone(), old.clone()],
            Mode::Eval,
        )
        .unwrap();
    let l_new = new_task_loss(&mut tape, out.probs[0], &batch.targets, Labeling::Single).unwrap();
    let rec = memory.responses.as_ref().unwrap().batch(old, &idx).unwrap();
    let l_old = response_loss(
        &mut tape,
        Default::default(),
        out.probs[1],
        &rec,
        Labeling::Single,
    )
    .unwrap();
    let (l_new, l_old) = (
        tape.value(l_new).item().unwrap(),
        tape.value(l_old).item().unwrap(),
    );

    for lambda in [1.0, 0.5, 3.0] {
        let mut cfg = StrategyConfig::new(Method::Lwf);
        cfg.lambda_o = lambda;
        let mut tape = Tape::new();
        let v = total_loss(&mut tape, &net, &batch, new, &cfg, &memory, Mode::Eval).unwrap();
        let got = tape.value(v).item().unwrap();
        assert!(
            (got - (l_new + lambda * l_old)).abs() < 1e-12,
            "{got} vs {l_new} + {lambda}·{l_old}"
        );
    }

    let mut tape = Tape::new();
    let v = total_loss(
        &mut tape,
        &net,
        &batch,
        new,
        &StrategyConfig::new(Method::FineTune),
        &memory,
        Mode::Eval,
    )
    .unwrap();
    assert_eq!(tape.value(v).item().unwrap(), l_new);
}

#[test]
fn zero_weight_matches_fine_tune_value_and_gradient() {
    let f = fixture();
    let (net, memory) = prepare_network(
        &f.net0,
        &f.stage(1),
        &StrategyConfig::new(Method::Lwf),
        0,
        1,
    )
    .unwrap();
    let batch = batch_of(&f.train[1], &[1, 2, 5, 8, 13]);
    let mut lwf = StrategyConfig::new(Method::Lwf);
    lwf.lambda_o = 0.0;
    let run = |cfg: &StrategyConfig| {
        let mut tape = Tape::new();
        let v = total_loss(
            &mut tape,
            &net,
            &batch,
            &f.tasks[1],
            cfg,
            &memory,
            Mode::Eval,
        )
        .unwrap();
        let g = tape.backward(v).unwrap();
        let shared: Vec<Vec<u64>> = net
            .shared_parameters()
            .iter()
            .chain(net.head(&f.tasks[1]).unwrap().output_parameters().iter())
            .map(|p| {
                g.param(p.id())
                    .unwrap()
                    .data()
                    .iter()
                    .map(|x| x.to_bits())
                    .collect()
            })
            .collect();
        (tape.value(v).item().unwrap().to_bits(), shared)
    };
    assert_eq!(run(&lwf), run(&StrategyConfig::new(Method::FineTune)));
}

#[test]
fn response_methods_need_responses() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = NetworkSpec {
        input_shape: vec![6],
        hidden: vec![4],
        ..NetworkSpec::default()
    };
    let net: Network<f64> =
        Network::new(&spec, f.tasks[1].clone(), HeadSpec::classes(3), &mut rng).unwrap();
    let mut memory = remember(&net, f.train[1].inputs()).unwrap();
    memory.responses = None;
    let batch = batch_of(&f.train[1], &[0]);
    let mut tape = Tape::new();
    let err = total_loss(
        &mut tape,
        &net,
        &batch,
        &f.tasks[1],
        &StrategyConfig::new(Method::Lwf),
        &memory,
        Mode::Eval,
    );
    assert!(err.is_err());
}

#[test]
fn warm_up_leaves_shared_and_old_heads_bit_identical() {
    let f = fixture();
    let cfg = StrategyConfig::new(Method::Lwf);
    let (mut net, _) = prepare_network(&f.net0, &f.stage(1), &cfg, 0, 1).unwrap();
    let trunk = trunk_print(&net);
    let old = segment_print(&net, &Segment::Head(f.tasks[0].clone()));
    let new = segment_print(&net, &Segment::Head(f.tasks[1].clone()));
    warm_up(&mut net, &f.train[1], &f.tasks[1], &cfg, &schedule()).unwrap();
    assert_eq!(trunk_print(&net), trunk);
    assert_eq!(segment_print(&net, &Segment::Head(f.tasks[0].clone())), old);
    assert_ne!(segment_print(&net, &Segment::Head(f.tasks[1].clone())), new);
}

#[test]
fn frozen_parts_stay_bit_identical() {
    let f = fixture();
    let probe = f.test[0].inputs().clone();
    let before = f.net0.predict(&probe, &f.tasks[0]).unwrap();
    let old_head = Segment::Head(f.tasks[0].clone());
    let old_print = segment_print(&f.net0, &old_head);
    let out_print = |net: &Network<f64>| {
        fingerprint_parameters(net.head(&f.tasks[0]).unwrap().output_parameters())
    };
    let old_out = out_print(&f.net0);

    let fe = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::FeatureExtraction),
        &schedule(),
        None,
    )
    .unwrap();
    assert_eq!(trunk_print(&fe.network), trunk_print(&f.net0));
    assert_eq!(fe.network.predict(&probe, &f.tasks[0]).unwrap(), before);

    let ft = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::FineTune),
        &schedule(),
        None,
    )
    .unwrap();
    assert_eq!(segment_print(&ft.network, &old_head), old_print);
    assert_ne!(trunk_print(&ft.network), trunk_print(&f.net0));

    let lfl = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::Lfl),
        &schedule(),
        None,
    )
    .unwrap();
    assert_eq!(out_print(&lfl.network), old_out);

    let lwf = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::Lwf),
        &schedule(),
        None,
    )
    .unwrap();
    assert_ne!(segment_print(&lwf.network, &old_head), old_print);
}

#[test]
fn fine_tune_fc_keeps_lower_trunk() {
    let f = fixture();
    let r = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::FineTuneFc),
        &schedule(),
        None,
    )
    .unwrap();
    assert_eq!(
        segment_print(&r.network, &Segment::TrunkLower),
        segment_print(&f.net0, &Segment::TrunkLower)
    );
    assert_ne!(
        segment_print(&r.network, &Segment::TrunkUpper),
        segment_print(&f.net0, &Segment::TrunkUpper)
    );
}

#[test]
fn expansion_preserves_old_outputs_until_trained() {
    let f = fixture();
    let probe = f.test[0].inputs().clone();
    let cfg = StrategyConfig::new(Method::Expansion);
    let (net, _) = prepare_network(&f.net0, &f.stage(1), &cfg, 0, 1).unwrap();
    assert_eq!(
        net.predict(&probe, &f.tasks[0]).unwrap(),
        f.net0.predict(&probe, &f.tasks[0]).unwrap()
    );
    let r = run_single(&f.net0, &f.problem(), &cfg, &schedule(), None).unwrap();
    // original entries are frozen, so old outputs survive training too
    assert_eq!(
        r.network.predict(&probe, &f.tasks[0]).unwrap(),
        f.net0.predict(&probe, &f.tasks[0]).unwrap()
    );
    let both = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::ExpansionLwf),
        &schedule(),
        None,
    )
    .unwrap();
    assert_ne!(
        both.network.predict(&probe, &f.tasks[0]).unwrap(),
        f.net0.predict(&probe, &f.tasks[0]).unwrap()
    );
}

#[test]
fn zero_weight_lwf_trajectory_equals_fine_tune() {
    let f = fixture();
    let mut sched = schedule();
    sched.weight_decay = 0.0;
    let mut lwf = StrategyConfig::new(Method::Lwf);
    lwf.lambda_o = 0.0;
    let ft = StrategyConfig::new(Method::FineTune);
    let new_head = Segment::Head(f.tasks[1].clone());
    for epochs in 1..=3 {
        sched.joint_epochs = epochs;
        let a = run_single(&f.net0, &f.problem(), &lwf, &sched, None)
            .unwrap()
            .network;
        let b = run_single(&f.net0, &f.problem(), &ft, &sched, None)
            .unwrap()
            .network;
        assert_eq!(
            trunk_print(&a),
            trunk_print(&b),
            "trunk after {epochs} epochs"
        );
        assert_eq!(segment_print(&a, &new_head), segment_print(&b, &new_head));
    }
}

#[test]
fn shared_warm_start_is_reused() {
    let f = fixture();
    let sched = schedule();
    let cfg = StrategyConfig::new(Method::FineTune);
    let (mut warm, _) = prepare_network(&f.net0, &f.stage(1), &cfg, sched.seed, 1).unwrap();
    warm_up(&mut warm, &f.train[1], &f.tasks[1], &cfg, &sched).unwrap();
    let a = run_single(&f.net0, &f.problem(), &cfg, &sched, Some(&warm)).unwrap();
    let b = run_single(&f.net0, &f.problem(), &cfg, &sched, None).unwrap();
    assert_eq!(a.network.fingerprint(), b.network.fingerprint());
    assert_eq!(a.metrics, b.metrics);
}

#[test]
fn schedule_errors() {
    let f = fixture();
    let mut sched = schedule();
    sched.warmup_epochs = 0;
    sched.joint_epochs = 0;
    assert!(run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::Lwf),
        &sched,
        None
    )
    .is_err());
    let mut sched = schedule();
    sched.base_lr = 1e12;
    let err = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::FineTune),
        &sched,
        None,
    )
    .unwrap_err();
    match err {
        Error::Divergence { method, .. } => assert_eq!(method, "fine-tune"),
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn joint_batches_alternate_and_take_the_minimum() {
    let plan = joint_batches(&[1000, 400], 50, 3, 0);
    assert_eq!(plan.len(), 16);
    for (k, (task, rows)) in plan.iter().enumerate() {
        assert_eq!(*task, k % 2);
        assert_eq!(rows.len(), 50);
    }
    let mut a: Vec<usize> = plan
        .iter()
        .filter(|(t, _)| *t == 0)
        .flat_map(|(_, r)| r.clone())
        .collect();
    let total_a = a.len();
    a.sort_unstable();
    a.dedup();
    assert_eq!((total_a, a.len()), (400, 400));
    assert_ne!(plan, joint_batches(&[1000, 400], 50, 3, 1));
}

#[test]
fn single_task_joint_training_is_fine_tuning() {
    let f = fixture();
    let mut sched = schedule();
    sched.joint_epochs = 2;
    let mut a = f.net0.clone();
    train_joint(&mut a, &[(f.tasks[0].clone(), &f.train[0])], &sched).unwrap();
    let mut b = f.net0.clone();
    let memory = remember(&b, f.train[0].inputs()).unwrap();
    joint_phase(
        &mut b,
        &f.train[0],
        &f.tasks[0],
        &memory,
        &StrategyConfig::new(Method::FineTune),
        &sched,
    )
    .unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert!(train_joint(&mut a, &[], &sched).is_err());
}

#[test]
fn joint_training_runs_on_both_tasks() {
    let f = fixture();
    let r = run_single(
        &f.net0,
        &f.problem(),
        &StrategyConfig::new(Method::JointTraining),
        &schedule(),
        None,
    )
    .unwrap();
    assert_eq!(r.metrics.len(), 2);
    assert!(
        r.metrics.iter().all(|(_, m)| m.value > 0.5),
        "{:?}",
        r.metrics
    );
}

#[test]
fn sequential_bookkeeping() {
    let f = fixture();
    let base = [f.stage(0)];
    let seq = [f.stage(1), f.stage(2)];
    let s = sequential_scenario(
        &f.net0,
        &base,
        &seq,
        &StrategyConfig::new(Method::Lwf),
        &schedule(),
    )
    .unwrap();
    assert_eq!(s.task_order, f.tasks);
    assert_eq!(s.responses.len(), 2);
    assert_eq!(s.responses[0].task_ids(), vec![f.tasks[0].clone()]);
    assert_eq!(
        s.responses[1].task_ids(),
        vec![f.tasks[0].clone(), f.tasks[1].clone()]
    );
    for (r, fp) in s.responses.iter().zip(&s.stage_fingerprints) {
        assert_eq!(r.fingerprint(), *fp);
    }
    assert_eq!(s.stage_fingerprints[0], f.net0.fingerprint());
    assert_eq!(s.records.len(), 1 + 2 + 3);
    let stages: Vec<usize> = s.records.iter().map(|r| r.stage).collect();
    assert_eq!(stages, vec![0, 1, 1, 2, 2, 2]);

    for m in [Method::FeatureExtraction, Method::JointTraining] {
        let s = sequential_scenario(&f.net0, &base, &seq, &StrategyConfig::new(m), &schedule())
            .unwrap();
        assert_eq!(s.records.len(), 3, "{m}");
        assert!(s.records.iter().all(|r| r.stage == 2));
    }
    let dup = [f.stage(1), f.stage(1)];
    assert!(matches!(
        sequential_scenario(
            &f.net0,
            &base,
            &dup,
            &StrategyConfig::new(Method::Lwf),
            &schedule()
        ),
        Err(Error::DuplicateTask(_))
    ));
}

#[test]
fn sweep_rows_are_sorted_and_independent() {
    let f = fixture();
    let mut sched = schedule();
    sched.joint_epochs = 1;
    let cfg = StrategyConfig::new(Method::Lwf);
    let a = lambda_sweep(&f.net0, &f.problem(), &[4.0, 0.25], &cfg, &sched, None).unwrap();
    let b = lambda_sweep(&f.net0, &f.problem(), &[0.25, 4.0], &cfg, &sched, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.iter().map(|r| r.lambda).collect::<Vec<_>>(),
        vec![0.25, 4.0]
    );
    let one = lambda_sweep(&f.net0, &f.problem(), &[1.0], &cfg, &sched, None).unwrap();
    let single = run_single(&f.net0, &f.problem(), &cfg, &sched, None).unwrap();
    assert_eq!(one[0].new, single.metrics[1].1);
    assert!(lambda_sweep(&f.net0, &f.problem(), &[], &cfg, &sched, None).is_err());
    assert!(lambda_sweep(&f.net0, &f.problem(), &[0.0], &cfg, &sched, None).is_err());
}

#[test]
fn streams_are_independent() {
    use rand::RngCore;
    let a = stream(1, &[2, 3]).next_u64();
    assert_eq!(a, stream(1, &[2, 3]).next_u64());
    assert_ne!(a, stream(1, &[3, 2]).next_u64());
    assert_ne!(a, stream(2, &[2, 3]).next_u64());
}
