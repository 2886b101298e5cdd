//! Record tables and the artifacts derived from them.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{BenchError, Result};

pub const RECORD_COLUMNS: [&str; 8] = [
    "scenario",
    "method",
    "task_id",
    "stage",
    "seed",
    "metric_kind",
    "value",
    "wall_time_s",
];

pub const CURVE_COLUMNS: [&str; 5] = [
    "lambda",
    "old_metric_mean",
    "new_metric_mean",
    "old_metric_sd",
    "new_metric_sd",
];

/// Marks sweep rows in the method column: `<label>@lambda=<value>`.
pub const LAMBDA_MARK: &str = "@lambda=";

/// One evaluation of one task after one stage of one run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Record {
    pub scenario: String,
    pub method: String,
    pub task_id: String,
    pub stage: usize,
    pub seed: u64,
    pub metric_kind: String,
    pub value: f64,
    pub wall_time_s: f64,
}

/// A cell that did not finish.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub method: String,
    pub task_id: String,
    pub stage: usize,
    pub metric_kind: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub scenario: String,
    pub method: String,
    pub task_id: String,
    pub stage: usize,
    pub metric_kind: String,
    /// Mean of `method` minus mean of the reference.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub lambda: f64,
    pub old_mean: f64,
    pub new_mean: f64,
    pub old_sd: f64,
    pub new_sd: f64,
}

/// Renders `v` with six significant digits and a `.` decimal point.
pub fn format_value(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    // the exponent after rounding decides the number of decimals
    let sci = format!("{v:.5e}");
    let exp: i32 = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .expect("rust float formatting");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        sci
    }
}

fn parse_value(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| BenchError::Records(format!("{what} `{s}` is not a number")))
}

/// Rounds through the rendered form, so in-memory values equal what a
/// reader of the CSV sees.
pub fn rendered(v: f64) -> f64 {
    format_value(v).parse().expect("rendered value parses")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|source| BenchError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let wrap = |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| BenchError::io(path, e))
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    write_rows(
        path,
        &RECORD_COLUMNS,
        records.iter().map(|r| {
            [
                r.scenario.clone(),
                r.method.clone(),
                r.task_id.clone(),
                r.stage.to_string(),
                r.seed.to_string(),
                r.metric_kind.clone(),
                format_value(r.value),
                format_value(r.wall_time_s),
            ]
        }),
    )
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let wrap = |source| BenchError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(wrap)?;
    let header: Vec<String> = r
        .headers()
        .map_err(wrap)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != RECORD_COLUMNS {
        return Err(BenchError::Records(format!(
            "{}: unexpected columns {header:?}",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(wrap)?;
        let stage = row[3]
            .parse()
            .map_err(|_| BenchError::Records(format!("stage `{}` is not an integer", &row[3])))?;
        let seed = row[4]
            .parse()
            .map_err(|_| BenchError::Records(format!("seed `{}` is not an integer", &row[4])))?;
        out.push(Record {
            scenario: row[0].to_string(),
            method: row[1].to_string(),
            task_id: row[2].to_string(),
            stage,
            seed,
            metric_kind: row[5].to_string(),
            value: parse_value(&row[6], "value")?,
            wall_time_s: parse_value(&row[7], "wall time")?,
        });
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups over seeds, keeping first-appearance order of the groups.
pub fn summarize(records: &[Record]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, Vec<f64>)> = Vec::new();
    for r in records {
        let same = |s: &SummaryRow| {
            s.scenario == r.scenario
                && s.method == r.method
                && s.task_id == r.task_id
                && s.stage == r.stage
                && s.metric_kind == r.metric_kind
        };
        match rows.iter_mut().find(|(s, _)| same(s)) {
            Some((_, vals)) => vals.push(r.value),
            None => rows.push((
                SummaryRow {
                    scenario: r.scenario.clone(),
                    method: r.method.clone(),
                    task_id: r.task_id.clone(),
                    stage: r.stage,
                    metric_kind: r.metric_kind.clone(),
                    mean: 0.0,
                    sd: 0.0,
                    n: 0,
                },
                vec![r.value],
            )),
        }
    }
    rows.into_iter()
        .map(|(mut s, vals)| {
            (s.mean, s.sd) = mean_sd(&vals);
            s.n = vals.len();
            s
        })
        .collect()
}

/// Every summary row with a matching reference row, as a difference from
/// the reference mean. Empty if the reference method is absent.
pub fn deltas(summary: &[SummaryRow], reference: &str) -> Vec<DeltaRow> {
    summary
        .iter()
        .filter_map(|s| {
            let base = summary.iter().find(|b| {
                b.method == reference
                    && b.scenario == s.scenario
                    && b.task_id == s.task_id
                    && b.stage == s.stage
                    && b.metric_kind == s.metric_kind
            })?;
            Some(DeltaRow {
                scenario: s.scenario.clone(),
                method: s.method.clone(),
                task_id: s.task_id.clone(),
                stage: s.stage,
                metric_kind: s.metric_kind.clone(),
                delta: s.mean - base.mean,
            })
        })
        .collect()
}

/// Old/new metric per sweep value from `<label>@lambda=<v>` records.
///
/// A run's new tasks are those scored at its last stage but not at stage
/// 0; per seed the old tasks are averaged, then seeds are summarized.
pub fn curve(records: &[Record]) -> Result<Vec<CurvePoint>> {
    let mut lambdas: Vec<(f64, String)> = Vec::new();
    for r in records {
        if let Some((_, v)) = r.method.split_once(LAMBDA_MARK) {
            let l = parse_value(v, "sweep value")?;
            if !lambdas.iter().any(|(_, m)| *m == r.method) {
                lambdas.push((l, r.method.clone()));
            }
        }
    }
    lambdas.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    let mut out = Vec::new();
    for (lambda, method) in lambdas {
        let rows: Vec<&Record> = records.iter().filter(|r| r.method == method).collect();
        let seeds: BTreeSet<u64> = rows.iter().map(|r| r.seed).collect();
        let (mut olds, mut news) = (Vec::new(), Vec::new());
        for seed in seeds {
            let run: Vec<&&Record> = rows.iter().filter(|r| r.seed == seed).collect();
            let last = run.iter().map(|r| r.stage).max().expect("non-empty run");
            let initial: BTreeSet<&str> = run
                .iter()
                .filter(|r| r.stage == 0)
                .map(|r| r.task_id.as_str())
                .collect();
            let at_last: Vec<&&&Record> = run.iter().filter(|r| r.stage == last).collect();
            let old: Vec<f64> = at_last
                .iter()
                .filter(|r| initial.contains(r.task_id.as_str()))
                .map(|r| r.value)
                .collect();
            let new: Vec<f64> = at_last
                .iter()
                .filter(|r| !initial.contains(r.task_id.as_str()))
                .map(|r| r.value)
                .collect();
            if old.is_empty() || new.is_empty() {
                return Err(BenchError::Records(format!(
                    "{method} seed {seed}: cannot tell old tasks from new"
                )));
            }
            olds.push(mean_sd(&old).0);
            news.push(mean_sd(&new).0);
        }
        let (old_mean, old_sd) = mean_sd(&olds);
        let (new_mean, new_sd) = mean_sd(&news);
        out.push(CurvePoint {
            lambda,
            old_mean,
            new_mean,
            old_sd,
            new_sd,
        });
    }
    Ok(out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_rows(
        path,
        &[
            "scenario",
            "method",
            "task_id",
            "stage",
            "metric_kind",
            "mean",
            "sd",
            "n",
        ],
        rows.iter().map(|s| {
            [
                s.scenario.clone(),
                s.method.clone(),
                s.task_id.clone(),
                s.stage.to_string(),
                s.metric_kind.clone(),
                format_value(s.mean),
                format_value(s.sd),
                s.n.to_string(),
            ]
        }),
    )
}

pub fn write_deltas(path: &Path, rows: &[DeltaRow]) -> Result<()> {
    write_rows(
        path,
        &[
            "scenario",
            "method",
            "task_id",
            "stage",
            "metric_kind",
            "delta",
        ],
        rows.iter().map(|d| {
            [
                d.scenario.clone(),
                d.method.clone(),
                d.task_id.clone(),
                d.stage.to_string(),
                d.metric_kind.clone(),
                format_value(d.delta),
            ]
        }),
    )
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_rows(
        path,
        &CURVE_COLUMNS,
        points.iter().map(|p| {
            [p.lambda, p.old_mean, p.new_mean, p.old_sd, p.new_sd]
                .map(format_value)
                .to_vec()
        }),
    )
}

pub fn write_failures(path: &Path, failures: &[Failure]) -> Result<()> {
    write_rows(
        path,
        &["method", "seed", "error"],
        failures
            .iter()
            .map(|f| [f.method.clone(), f.seed.to_string(), f.error.clone()]),
    )
}

#[derive(Serialize)]
struct JsonReport<'a> {
    name: &'a str,
    scenario: &'a str,
    config_fingerprint: &'a str,
    records: Vec<Record>,
    val_records: Vec<Record>,
    failures: &'a [Failure],
}

/// Everything an experiment produced, ready to be written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    pub name: String,
    pub scenario: String,
    pub config_fingerprint: String,
    pub reference: String,
    /// Test-split records.
    pub records: Vec<Record>,
    pub val_records: Vec<Record>,
    pub failures: Vec<Failure>,
}

impl Artifacts {
    /// Writes `records.csv`, `records_val.csv`, `summary.csv`, `delta.csv`,
    /// `failures.csv`, `report.json` and, for sweeps, `curve.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if self.records.is_empty() && self.failures.is_empty() {
            return Err(BenchError::Records("nothing to report".into()));
        }
        fs::create_dir_all(dir).map_err(|e| BenchError::io(dir, e))?;
        write_records(&dir.join("records.csv"), &self.records)?;
        write_records(&dir.join("records_val.csv"), &self.val_records)?;
        write_derived(dir, &self.records, &self.reference)?;
        write_failures(&dir.join("failures.csv"), &self.failures)?;
        let round = |rs: &[Record]| -> Vec<Record> {
            rs.iter()
                .map(|r| Record {
                    value: rendered(r.value),
                    wall_time_s: rendered(r.wall_time_s),
                    ..r.clone()
                })
                .collect()
        };
        let json = JsonReport {
            name: &self.name,
            scenario: &self.scenario,
            config_fingerprint: &self.config_fingerprint,
            records: round(&self.records),
            val_records: round(&self.val_records),
            failures: &self.failures,
        };
        let path = dir.join("report.json");
        let mut text = serde_json::to_string_pretty(&json).expect("report serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| BenchError::io(&path, e))
    }
}

/// Summary, delta and (when sweep rows are present) curve files.
pub fn write_derived(dir: &Path, records: &[Record], reference: &str) -> Result<()> {
    let summary = summarize(records);
    write_summary(&dir.join("summary.csv"), &summary)?;
    write_deltas(&dir.join("delta.csv"), &deltas(&summary, reference))?;
    let points = curve(records)?;
    if !points.is_empty() {
        write_curve(&dir.join("curve.csv"), &points)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: &str, task: &str, stage: usize, seed: u64, value: f64) -> Record {
        Record {
            scenario: "single-task".into(),
            method: method.into(),
            task_id: task.into(),
            stage,
            seed,
            metric_kind: "accuracy".into(),
            value,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_value(0.953333333), "0.953333");
        assert_eq!(format_value(1.0), "1.00000");
        assert_eq!(format_value(0.0), "0.00000");
        assert_eq!(format_value(0.99999996), "1.00000");
        assert_eq!(format_value(-0.0123456789), "-0.0123457");
        assert_eq!(format_value(12.5), "12.5000");
        assert_eq!(format_value(1.5e-7), "1.50000e-7");
        for v in [0.1, 0.123456, 0.5, 0.999999] {
            assert_eq!(rendered(v), v);
        }
    }

    #[test]
    fn six_records_make_seven_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let rs: Vec<Record> = (0..6)
            .map(|i| rec("lwf", "old", i % 2, i as u64 / 2, 0.25 * i as f64))
            .collect();
        write_records(&path, &rs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert_eq!(text.lines().next().unwrap(), RECORD_COLUMNS.join(","));
        assert_eq!(read_records(&path).unwrap(), rs);
    }

    #[test]
    fn delta_identity_and_zero_reference_row() {
        let mut rs = Vec::new();
        for seed in 0..3 {
            rs.push(rec("lwf", "old", 1, seed, 0.9 - 0.01 * seed as f64));
            rs.push(rec("fine-tune", "old", 1, seed, 0.7 + 0.02 * seed as f64));
            rs.push(rec("fine-tune", "new", 1, seed, 0.8));
        }
        let s = summarize(&rs);
        let d = deltas(&s, "lwf");
        // no reference row for the new task, so only two deltas
        assert_eq!(d.len(), 2);
        let lwf = s.iter().find(|r| r.method == "lwf").unwrap();
        assert_eq!(d[0].delta, 0.0);
        let ft = s
            .iter()
            .find(|r| r.method == "fine-tune" && r.task_id == "old")
            .unwrap();
        assert!((d[1].delta + lwf.mean - ft.mean).abs() < 1e-9);
        assert_eq!(ft.n, 3);
        assert!((ft.sd - 0.02).abs() < 1e-12);
    }

    #[test]
    fn curve_averages_old_tasks_then_seeds() {
        let mut rs = Vec::new();
        for (l, old, new) in [(4.0, 0.9, 0.6), (0.25, 0.5, 0.8)] {
            let m = format!("lwf{LAMBDA_MARK}{l}");
            for seed in 0..2 {
                rs.push(rec(&m, "old", 0, seed, 0.95));
                rs.push(rec(&m, "old", 1, seed, old + 0.1 * seed as f64));
                rs.push(rec(&m, "new", 1, seed, new));
            }
        }
        let c = curve(&rs).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c[0].lambda, 0.25);
        assert!((c[0].old_mean - 0.55).abs() < 1e-12);
        assert!((c[1].new_mean - 0.6).abs() < 1e-12);
        assert!((c[1].old_sd - (0.005f64).sqrt()).abs() < 1e-12);
        assert!(curve(&[rec("lwf", "old", 1, 0, 0.5)]).unwrap().is_empty());
    }

    #[test]
    fn write_failure_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("r.csv");
        let err = write_records(&bad, &[rec("lwf", "old", 0, 0, 0.5)]).unwrap_err();
        assert!(err.to_string().contains("missing"), "{err}");
    }
}
