use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rmablab_core::experiment::{emit_report, load_config, load_records, replay_record, run_experiment, RunOptions};

#[derive(Parser)]
#[command(name = "rmablab", version, about = "LLM reward search and fairness audit for restless bandits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or continue) the experiment grid described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Skip cells that already have a record instead of refusing to start.
        #[arg(long)]
        resume: bool,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Build report tables from a directory of run records.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also draw SVG bar charts.
        #[arg(long)]
        svg: bool,
    },
    /// Load and check a config file without running anything.
    ValidateConfig { path: PathBuf },
    /// Re-execute one recorded run from its transcript and compare.
    Replay {
        #[arg(long)]
        record: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run { config, resume, workers } => {
            let cfg = load_config(&config)?;
            let summary = run_experiment(&cfg, RunOptions { resume, workers })?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            if let Some(reason) = &summary.aborted {
                eprintln!("run stopped early ({reason}); re-run with --resume to fill the missing cells");
                return Ok(ExitCode::from(2));
            }
            println!("report: {}", summary.run_dir.join("report").display());
        }
        Command::Report { records, out, svg } => {
            let records = load_records(&records)?;
            if records.is_empty() {
                bail!("no records found");
            }
            for path in emit_report(&records, &out, svg)? {
                println!("{}", path.display());
            }
        }
        Command::ValidateConfig { path } => {
            let cfg = load_config(&path)?;
            let cells = cfg.goals.len() * cfg.cohort.alphas.len() * cfg.runs_per_cell;
            println!(
                "ok: {} language(s), {} goal prompt(s), {} alpha value(s), {} run(s) per cell = {cells} cells",
                cfg.languages.len(),
                cfg.goals.len() / cfg.languages.len(),
                cfg.cohort.alphas.len(),
                cfg.runs_per_cell
            );
            println!("run directory: {}", cfg.run_dir().display());
        }
        Command::Replay { record } => {
            let (outcome, _) =
                replay_record(&record).with_context(|| format!("replaying {}", record.display()))?;
            println!("{}", serde_json::to_string_pretty(&outcome)?);
            if !outcome.matches {
                eprintln!("replay diverged from the stored record");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
