use std::fs;
use std::path::{Path, PathBuf};

use lwf_bench::report::{read_records, summarize, CURVE_COLUMNS, RECORD_COLUMNS};
use lwf_bench::{run_experiment, LoadedConfig, RunOptions};

const SYNTH: &str = r#"
schema_version = 1
name = "synth"
scenario = "single-task"
seeds = [0, 1]

[data]
kind = "synth"
split_seed = 3

[data.synth]
classes_per_task = 3
dim = 6
per_class = 30
seed = 4

[[tasks]]
id = "a"

[[tasks]]
id = "b"

[network]
hidden = [12, 8]
dropout = 0.2

[pretrain]
epochs = 3
lr = 0.05
batch_size = 16

[schedule]
warmup_epochs = 1
joint_epochs = 2
lr = 0.05
batch_size = 16

[[methods]]
method = "lwf"

[[methods]]
method = "fine-tune"

[[methods]]
method = "feature-extraction"
"#;

fn load(text: &str) -> LoadedConfig {
    LoadedConfig::from_bytes(text.as_bytes(), PathBuf::new()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn single_task_matrix_is_complete_and_deltas_are_relative_to_lwf() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run_experiment(&load(SYNTH), &RunOptions::default()).unwrap();
    assert!(outcome.succeeded());
    outcome.artifacts.write(dir.path()).unwrap();
    let records = read_records(&dir.path().join("records.csv")).unwrap();
    // methods · seeds · {(old, 0), (old, 1), (new, 1)}
    assert_eq!(records.len(), 3 * 2 * 3);
    assert_eq!(outcome.artifacts.val_records.len(), records.len());
    let mut keys: Vec<_> = records
        .iter()
        .map(|r| (&r.method, &r.task_id, r.stage, r.seed))
        .collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), records.len());
    assert!(records
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.value) && r.wall_time_s == 0.0));

    let summary = summarize(&records);
    let delta = fs::read_to_string(dir.path().join("delta.csv")).unwrap();
    let mut rows = delta.lines().skip(1);
    for s in &summary {
        let line = rows.next().unwrap();
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!((cols[1], cols[2]), (s.method.as_str(), s.task_id.as_str()));
        let d: f64 = cols[5].parse().unwrap();
        let lwf = summary
            .iter()
            .find(|b| b.method == "lwf" && b.task_id == s.task_id && b.stage == s.stage)
            .unwrap();
        if s.method == "lwf" {
            assert_eq!(d, 0.0);
        }
        // the file holds six significant digits
        assert!((d + lwf.mean - s.mean).abs() < 1e-6, "{line}");
    }
    let json: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), records.len());
    assert_eq!(
        json["config_fingerprint"].as_str().unwrap(),
        lwf_bench::config::fingerprint(SYNTH.as_bytes())
    );
    let first = &json["records"][0];
    for c in RECORD_COLUMNS {
        assert!(!first[c].is_null(), "json record lacks {c}");
    }
}

#[test]
fn reruns_are_byte_identical_whatever_the_thread_count() {
    let cfg = load(SYNTH);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &RunOptions::default())
        .unwrap()
        .artifacts
        .write(a.path())
        .unwrap();
    let opts = RunOptions {
        jobs: 4,
        ..RunOptions::default()
    };
    run_experiment(&cfg, &opts)
        .unwrap()
        .artifacts
        .write(b.path())
        .unwrap();
    assert_eq!(files(a.path()), files(b.path()));
}

#[test]
fn seed_offset_shifts_seeds() {
    let opts = RunOptions {
        seed_offset: 10,
        ..RunOptions::default()
    };
    let out = run_experiment(&load(SYNTH), &opts).unwrap();
    let mut seeds: Vec<u64> = out.artifacts.records.iter().map(|r| r.seed).collect();
    seeds.dedup();
    assert_eq!(&seeds[..2], &[10, 11]);
}

#[test]
fn failing_cells_are_reported_and_the_rest_finish() {
    let text = format!("{SYNTH}\n[[methods]]\nmethod = \"fine-tune\"\nlabel = \"runaway\"\nlr_scale = 1e200\nwarm_up = false\n");
    let out = run_experiment(&load(&text), &RunOptions::default()).unwrap();
    assert!(!out.succeeded());
    assert_eq!(out.artifacts.failures.len(), 2);
    assert!(out
        .artifacts
        .failures
        .iter()
        .all(|f| f.method == "runaway" && f.error.contains("diverged")));
    assert_eq!(out.artifacts.records.len(), 3 * 2 * 3);
}

#[test]
fn sweep_writes_a_sorted_curve() {
    let text = SYNTH.replace("single-task", "lambda-sweep").replace(
        "[[methods]]\nmethod = \"fine-tune\"\n\n[[methods]]\nmethod = \"feature-extraction\"\n",
        "",
    ) + "\n[sweep]\nlambdas = [4.0, 0.25]\n";
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&load(&text), &RunOptions::default()).unwrap();
    out.artifacts.write(dir.path()).unwrap();
    let curve = fs::read_to_string(dir.path().join("curve.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], CURVE_COLUMNS.join(","));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.250000,"));
    assert!(lines[2].starts_with("4.00000,"));
    let methods: Vec<&str> = out
        .artifacts
        .records
        .iter()
        .map(|r| r.method.as_str())
        .collect();
    assert!(methods.contains(&"lwf@lambda=0.25"));
}

#[test]
fn sequential_records_every_stage_and_task() {
    let text = SYNTH.replace("single-task", "sequential").replace(
        "[[tasks]]\nid = \"b\"\n",
        "[[tasks]]\nid = \"b\"\n\n[[tasks]]\nid = \"c\"\n",
    );
    let out = run_experiment(&load(&text), &RunOptions::default()).unwrap();
    assert!(out.succeeded(), "{:?}", out.artifacts.failures);
    let count = |m: &str| {
        out.artifacts
            .records
            .iter()
            .filter(|r| r.method == m)
            .count()
    };
    // stage 0: a; stage 1: a, b; stage 2: a, b, c
    assert_eq!(count("lwf"), 2 * 6);
    assert_eq!(count("fine-tune"), 2 * 6);
    // not cumulative: only the final stage is scored
    assert_eq!(count("feature-extraction"), 2 * 3);
}

#[test]
fn dataset_size_and_branch_depth_variants() {
    let sized = SYNTH
        .replace("single-task", "dataset-size")
        .replace("split_seed = 3", "split_seed = 3\nfractions = [0.5, 1.0]");
    let out = run_experiment(&load(&sized), &RunOptions::default()).unwrap();
    assert!(out.succeeded());
    let labels: Vec<&str> = out
        .artifacts
        .records
        .iter()
        .map(|r| r.method.as_str())
        .collect();
    assert!(labels.contains(&"lwf@size=0.5") && labels.contains(&"fine-tune@size=1"));
    assert_eq!(out.artifacts.records.len(), 3 * 2 * 2 * 3);

    let deep = SYNTH.replace("single-task", "branch-depth-compare")
        + "\n[[methods]]\nmethod = \"lwf\"\nlabel = \"lwf-branch-1\"\nbranch_depth = 1\n";
    let out = run_experiment(&load(&deep), &RunOptions::default()).unwrap();
    assert!(out.succeeded(), "{:?}", out.artifacts.failures);
    let stage0 = |m: &str| {
        out.artifacts
            .records
            .iter()
            .find(|r| r.method == m && r.stage == 0)
            .unwrap()
            .value
    };
    // each depth has its own initial network
    assert!(stage0("lwf-branch-1") > 0.0 && stage0("lwf") > 0.0);
}

#[test]
fn multi_label_data_is_scored_with_map() {
    let text = SYNTH
        .replace("kind = \"synth\"", "kind = \"synth-multilabel\"")
        .replace(
            "[[tasks]]\nid = \"a\"\n",
            "[[tasks]]\nid = \"a\"\nclasses = [0, 1, 2]\n",
        )
        .replace(
            "[[tasks]]\nid = \"b\"\n",
            "[[tasks]]\nid = \"b\"\nclasses = [3, 4]\n",
        );
    let out = run_experiment(&load(&text), &RunOptions::default()).unwrap();
    assert!(out.succeeded(), "{:?}", out.artifacts.failures);
    assert!(out.artifacts.records.iter().all(|r| r.metric_kind == "mAP"));
}
