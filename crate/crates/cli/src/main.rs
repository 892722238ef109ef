//! Command-line orchestration: dataset preparation, per-variant
//! training, evaluation, and report aggregation, all reproducible from
//! a seeded JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use plm_core::trainer::Variant;
use plm_core::PlmError;

#[derive(Parser)]
#[command(name = "plm", about = "Part-level multi-labeling laboratory", version)]
struct Cli {
    /// Suppress informational output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or ingest the dataset and inject label noise.
    Prepare {
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train one variant on the prepared dataset.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// plm_f, plm_r, forward_baseline, or ce_baseline.
        #[arg(long)]
        variant: String,
    },
    /// Measure finished runs and write the summary.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory (default: <output_dir>/reports).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run directories (default: every run under <output_dir>/runs).
        runs: Vec<PathBuf>,
    },
    /// Aggregate record files from earlier evaluations.
    Report {
        /// Output directory for the summary.
        #[arg(long)]
        out: PathBuf,
        /// records.json files produced by eval.
        records: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &PlmError) -> u8 {
    match err {
        PlmError::Config(_) | PlmError::Format(_) => 2,
        PlmError::Train { .. } => 3,
        PlmError::Eval(_) | PlmError::Comparison(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<(), PlmError> {
    match cli.command {
        Command::Prepare { config } => {
            let (cfg, base) = RunConfig::load(&config.config)?;
            commands::cmd_prepare(&cfg, &base, cli.quiet)?;
        }
        Command::Train { config, variant } => {
            let (cfg, base) = RunConfig::load(&config.config)?;
            let variant = Variant::parse(&variant)?;
            commands::cmd_train(&cfg, &base, variant, cli.quiet)?;
        }
        Command::Eval { config, out, runs } => {
            let (cfg, base) = RunConfig::load(&config.config)?;
            commands::cmd_eval(&cfg, &base, &runs, out.as_deref(), cli.quiet)?;
        }
        Command::Report { out, records } => {
            commands::cmd_report(&records, &out, cli.quiet)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
