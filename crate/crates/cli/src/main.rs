//! `seqclt`: config-driven laboratory runner for sequential expanding-map
//! experiments.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 when an
//! assertion-style check inside the experiment failed.

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "seqclt", version, about = "sequential expanding-map laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `out_dir`; defaults to
        /// the config file's stem).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; affects speed only, never results.
        #[arg(long)]
        threads: Option<usize>,
        /// Replace the config's seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Merge rate reports into one convergence table.
    Summarize {
        reports: Vec<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export a cylinder partition of the configured schedule as CSV.
    Cylinders {
        config: PathBuf,
        /// 1-based start index of the composition.
        #[arg(long, default_value_t = 1)]
        start: usize,
        /// Composition depth.
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, out_dir, threads, seed_override } => {
            if let Some(t) = threads {
                // best effort: the pool may already exist in test harnesses
                let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
            }
            let mut loaded = config::load_config(&config)?;
            if let Some(seed) = seed_override {
                loaded.experiment.override_seed(seed);
            }
            let out = out_dir
                .or(loaded.out_dir.clone())
                .unwrap_or_else(|| {
                    PathBuf::from(config.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_else(|| "out".into()))
                });
            match runner::run(&loaded.experiment, &loaded.raw, &out)? {
                runner::RunOutcome::Ok => Ok(ExitCode::SUCCESS),
                runner::RunOutcome::CheckFailed => {
                    eprintln!("one or more checks failed; see {}", out.join("report.json").display());
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Summarize { reports, out } => {
            let table = runner::summarize(&reports)?;
            match out {
                Some(path) => std::fs::write(&path, table)?,
                None => print!("{table}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Cylinders { config, start, depth, out } => {
            let loaded = config::load_config(&config)?;
            let (atlas, schedule) = match &loaded.experiment {
                config::ExperimentConfig::MemoryLoss { atlas, schedule, .. }
                | config::ExperimentConfig::Correlation { atlas, schedule, .. }
                | config::ExperimentConfig::EiIdentity { atlas, schedule, .. }
                | config::ExperimentConfig::CltRate { atlas, schedule, .. } => (atlas, schedule),
                other => anyhow::bail!(
                    "config kind `{}` does not declare a sequential schedule",
                    other.kind_name()
                ),
            };
            let sched = schedule.build(atlas)?;
            let cylinders =
                seqclt_core::maps::cylinder_partition(&sched, start, depth, seqclt_core::maps::CYLINDER_CAP)
                    .map_err(|e| anyhow::anyhow!("{e}"))?;
            let mut csv = String::from("left,right,depth,word\n");
            for c in &cylinders {
                use std::fmt::Write as _;
                let _ = writeln!(csv, "{},{},{},{}", c.lo, c.hi, c.depth, c.word_string());
            }
            match out {
                Some(path) => std::fs::write(&path, csv)?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
