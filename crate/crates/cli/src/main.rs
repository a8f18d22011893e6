//! Command-line experiment runner for the gap-aware increment toolkit.
//!
//! Five subcommands tie the library into reproducible experiments:
//! `gen-data` materializes a synthetic paired dataset, `train` fits the
//! increment predictor or replays the frozen baseline, `oracle` runs the
//! closed-form trust-region updates over sampled batches, `gradcheck`
//! certifies analytic gradients against central finite differences, and
//! `compare` tabulates finished runs side by side.
//!
//! Every run is pinned by its config and seed: rerunning a command
//! produces byte-identical manifests and CSVs, with wall time kept in a
//! separate timing file. Exit codes: 0 success, 1 check failure, 2 usage
//! or config error, 3 runtime divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod manifest;

/// Command failure carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// A certification or comparison check did not hold (exit 1).
    pub fn check(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    /// Bad usage, configuration, or input files (exit 2).
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<gare_core::Error> for CliError {
    fn from(e: gare_core::Error) -> Self {
        use gare_core::Error;
        let code = match &e {
            Error::Divergence { .. }
            | Error::DegenerateNorm { .. }
            | Error::DegeneratePair { .. }
            | Error::NegativeDiscriminant { .. }
            | Error::NonScalarRoot { .. } => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError {
            code: 2,
            message: e.to_string(),
        }
    }
}

pub type CmdResult = Result<(), CliError>;

#[derive(Parser)]
#[command(name = "gare", version, about = "Gap-aware contrastive optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset directory
    GenData {
        /// Experiment config JSON (or a finished run's manifest)
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the dataset
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Train the increment predictor or replay the frozen baseline
    Train {
        /// Experiment config JSON (or a finished run's manifest)
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the run artifacts
        #[arg(long)]
        out: PathBuf,
        /// Override the config's mode (baseline or gare)
        #[arg(long)]
        mode: Option<String>,
        /// Override the config's training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Run closed-form trust-region updates over sampled batches
    Oracle {
        /// Experiment config JSON (or a finished run's manifest)
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Coupled update steps per batch
        #[arg(long)]
        steps: usize,
        /// Trust-region radius (default: 5% of the mean anchor norm)
        #[arg(long)]
        epsilon: Option<f64>,
        /// Number of training batches to sample
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// Output directory for the trajectory CSVs
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Certify analytic gradients against central finite differences
    Gradcheck {
        /// Which checks to run: all, contrastive, regularizers, or psi
        #[arg(long, default_value = "all")]
        module: String,
        /// Seed for the sampled check instances
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Bias the named check's analytic gradient (negative control)
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Tabulate finished runs side by side
    Compare {
        /// Two or more run manifests
        #[arg(long, num_args = 2.., required = true)]
        runs: Vec<PathBuf>,
        /// Output directory for the comparison CSV
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory
        #[arg(long)]
        force: bool,
    },
}

fn main() -> ExitCode {
    gare_core::par::init_threads_from_env();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out, force } => commands::gen_data(&config, &out, force),
        Command::Train {
            config,
            data,
            out,
            mode,
            seed,
            force,
        } => commands::train(&config, &data, &out, mode.as_deref(), seed, force),
        Command::Oracle {
            config,
            data,
            steps,
            epsilon,
            batches,
            out,
            force,
        } => commands::oracle(&config, &data, steps, epsilon, batches, &out, force),
        Command::Gradcheck {
            module,
            seed,
            inject_fault,
        } => commands::gradcheck(&module, seed, inject_fault.as_deref()),
        Command::Compare { runs, out, force } => commands::compare(&runs, &out, force),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
