use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lwf_bench::report::{read_records, write_derived};
use lwf_bench::tuning::{select_epochs, write_tuned_config};
use lwf_bench::{run_experiment, LoadedConfig, RunOptions};
use lwf_core::verify::random_network_suite;

#[derive(Parser)]
#[command(
    name = "lwf-bench",
    version,
    about = "Run continual-learning strategy experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method, seed) cell of a config and write reports.
    Run {
        config: PathBuf,
        /// Added to every configured seed.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Report measured wall time; reruns are then no longer
        /// byte-identical.
        #[arg(long)]
        wall_time: bool,
    },
    /// Choose the joint-phase epoch count on new-task validation data and
    /// write a config with that choice.
    SweepEpochs {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        candidates: Vec<usize>,
        /// Tuned config path; defaults to `<config>.tuned.toml`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare tape gradients with finite differences on random networks.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Recompute summary, delta and curve files from a records directory.
    Report {
        records_dir: PathBuf,
        #[arg(long, default_value = "lwf")]
        reference: String,
        /// Where to write; defaults to the records directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            seed_offset,
            jobs,
            out,
            wall_time,
        } => {
            let loaded = LoadedConfig::from_path(&config)?;
            let opts = RunOptions {
                seed_offset,
                jobs,
                wall_time,
            };
            let outcome = run_experiment(&loaded, &opts)?;
            outcome.artifacts.write(&out)?;
            for f in &outcome.artifacts.failures {
                eprintln!("cell {} seed {} failed: {}", f.method, f.seed, f.error);
            }
            println!(
                "{}: {} records, {} failed cells -> {}",
                loaded.config.name,
                outcome.artifacts.records.len(),
                outcome.artifacts.failures.len(),
                out.display()
            );
            Ok(outcome.succeeded())
        }
        Command::SweepEpochs {
            config,
            candidates,
            out,
        } => {
            let loaded = LoadedConfig::from_path(&config)?;
            let choice = select_epochs(&loaded, &candidates)?;
            for (e, s) in &choice.scores {
                println!("joint_epochs={e} new-task val={s:.4}");
            }
            let target = out.unwrap_or_else(|| config.with_extension("tuned.toml"));
            write_tuned_config(&config, &target, choice.epochs)?;
            println!("chose {} -> {}", choice.epochs, target.display());
            Ok(true)
        }
        Command::Gradcheck {
            count,
            seed,
            tolerance,
        } => {
            let report = random_network_suite(count, seed, tolerance)?;
            for c in report.checks.iter().filter(|c| !c.passed) {
                println!(
                    "FAIL {} ({} scalars): {:.3e}",
                    c.description, c.scalars, c.max_rel_error
                );
            }
            println!(
                "{} networks, {} entries, max relative error {:.3e} (tolerance {tolerance:e})",
                report.checks.len(),
                report.entries_checked(),
                report.max_rel_error()
            );
            Ok(report.passed())
        }
        Command::Report {
            records_dir,
            reference,
            out,
        } => {
            let records = read_records(&records_dir.join("records.csv"))?;
            let out = out.unwrap_or(records_dir);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_derived(&out, &records, &reference)?;
            println!(
                "{} records summarized into {}",
                records.len(),
                out.display()
            );
            Ok(true)
        }
    }
}
