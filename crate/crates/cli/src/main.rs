//! Command-line front end: dataset generation, training runs, grids over
//! config variants, evaluation of existing runs, and report aggregation.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure.

mod gen_data;
mod plots;
mod report;
mod run;

use clap::{Parser, Subcommand};
use slotkit::SlotError;
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable consulted when `--out` is omitted for runs.
pub const RUN_ROOT_ENV: &str = "SLOTKIT_RUN_ROOT";

#[derive(Parser)]
#[command(name = "slotkit", version, about = "object-centric contrastive learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-object dataset on disk.
    GenData(gen_data::Args),
    /// Train one model from a config file and evaluate it.
    Run(run::Args),
    /// Train a grid of config variants across seeds.
    Grid(run::GridArgs),
    /// Re-evaluate an existing run directory from its checkpoint.
    EvalOnly(run::EvalOnlyArgs),
    /// Aggregate eval results across run directories into a report.
    Report(report::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => gen_data::exec(args),
        Command::Run(args) => run::exec(args),
        Command::Grid(args) => run::exec_grid(args),
        Command::EvalOnly(args) => run::exec_eval_only(args),
        Command::Report(args) => report::exec(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<SlotError>()
                .is_some_and(|e| matches!(e, SlotError::Config(_)));
            if config_error {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

/// Resolve the run root from `--out` or the environment.
pub fn run_root(out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = out {
        return Ok(p);
    }
    if let Ok(p) = std::env::var(RUN_ROOT_ENV) {
        return Ok(PathBuf::from(p));
    }
    Err(SlotError::Config(format!(
        "no output directory: pass --out or set {RUN_ROOT_ENV}"
    ))
    .into())
}
