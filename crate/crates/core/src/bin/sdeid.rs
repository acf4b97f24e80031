//! Command-line driver for the identification pipeline.
//!
//! Workflow: `simulate` fills the output directory with per-node moment
//! tables, `train` fits the surrogate networks (all-grid baseline or one
//! of the RBMS strategies), `analyze` produces escape-probability and
//! stationary-density artifacts from a checkpoint, `robustness` runs the
//! initial-perturbation protocol, and `report` verifies the manifest and
//! summarizes what is on disk.
//!
//! Exit codes: 0 success, 1 configuration/IO problem, 2 numerical failure.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use sdeid::config::ExperimentConfig;
use sdeid::pipeline;
use sdeid::train::TrainMode;
use sdeid::Result;

#[derive(Parser)]
#[command(name = "sdeid", version, about = "SDE drift/diffusion identification from ensemble moments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Agf,
    Rbms1,
    Rbms2,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Agf => TrainMode::Agf,
            ModeArg::Rbms1 => TrainMode::Rbms1,
            ModeArg::Rbms2 => TrainMode::Rbms2,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate ensembles at every grid node and write moment tables.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Override both the master seed and the data seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train surrogates on the simulated moments.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Escape-probability and stationary-density artifacts from a checkpoint.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initial-value perturbation protocol (paired AGF / RBMS-II reports).
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Verify the output manifest and summarize artifacts.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, seed } => load(&config, seed).and_then(|c| pipeline::simulate(&c)),
        Command::Train { config, mode, seed } => {
            load(&config, seed).and_then(|c| pipeline::train(&c, mode.into()))
        }
        Command::Analyze {
            config,
            checkpoint,
            seed,
        } => load(&config, seed).and_then(|c| pipeline::analyze(&c, &checkpoint)),
        Command::Robustness { config, seed } => {
            load(&config, seed).and_then(|c| pipeline::robustness(&c))
        }
        Command::Report { config } => load(&config, None).and_then(|c| pipeline::report(&c)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.sim.seed = s;
    }
    Ok(cfg)
}

