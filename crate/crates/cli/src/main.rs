//! `ldpm` command-line entry point.
//!
//! Every subcommand reads a single JSON config and writes its artifacts into
//! the output directory. Exit codes: 0 success, 2 user or configuration
//! error, 3 numerical failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ldpm_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ldpm", about = "Surrogate-augmented deep panel forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate a panel and write it with its ground truth.
    Simulate,
    /// Fit both stages on a dataset and write the model bundle and report.
    Fit,
    /// Run the simulated method comparison and write the PMSE table.
    Evaluate,
    /// Fit, calibrate group-wise conformal cutoffs and write test intervals.
    Conformal,
    /// Symmetry, gradient and shortcut diagnostics on a fitted model.
    Diagnose,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let mut cfg = config::RunConfig::load(&path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set \"out\"".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", out.display())))?;
    if let Some(n) = std::env::var("LDPM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon_pool(n);
    }
    match cli.command {
        Command::Simulate => commands::simulate(&cfg, &out),
        Command::Fit => commands::fit(&cfg, &out),
        Command::Evaluate => commands::evaluate(&cfg, &out),
        Command::Conformal => commands::conformal(&cfg, &out),
        Command::Diagnose => commands::diagnose(&cfg, &out),
    }
}

fn rayon_pool(n: usize) -> Result<(), ldpm_core::Error> {
    ldpm_core::set_thread_limit(n)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
