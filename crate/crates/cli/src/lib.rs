//! Command-line driver: configuration, error mapping to exit codes, and the
//! `simulate`, `train`, `fit`, `oracle`, `bench`, `repeat` and `convert` commands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use ivim_core::abc::AbcError;
use ivim_core::agp::{AgpError, CheckpointError, ModelFileError};
use ivim_core::eval::EvalError;
use ivim_core::lsq::LsqError;
use ivim_core::protocol::ProtocolError;
use ivim_core::volume::VolumeError;
use thiserror::Error;

pub use config::{Preset, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<AgpError> for CliError {
    fn from(e: AgpError) -> Self {
        match e {
            AgpError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            AgpError::InvalidConfig(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LsqError> for CliError {
    fn from(e: LsqError) -> Self {
        match e {
            LsqError::InvalidConfig(_) => CliError::Config(e.to_string()),
            LsqError::FitFailed(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidSpec(_) => CliError::Config(e.to_string()),
            EvalError::UndefinedPair { .. } | EvalError::EmptyMask => CliError::Numerical(e.to_string()),
            EvalError::Agp(a) => a.into(),
            EvalError::Lsq(l) => l.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AbcError> for CliError {
    fn from(e: AbcError) -> Self {
        match e {
            AbcError::Protocol(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<VolumeError> for CliError {
    fn from(e: VolumeError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelFileError> for CliError {
    fn from(e: ModelFileError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ivim", version, about = "IVIM parameter estimation: simulation, LSQ and AGP fitting, evaluation")]
pub struct Cli {
    /// TOML run configuration; defaults are used for absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Single worker; outputs are byte-identical across runs.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Training size preset; overrides the config preset.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Lsq,
    Agp,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a signal volume and its ground-truth parameter volume.
    Simulate {
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train the posterior network.
    Train {
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total iterations and write a checkpoint.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Fit parameter maps to a signal volume.
    Fit {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(short, long)]
        input: PathBuf,
        /// Trained model; required for `--method agp`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Rejection-sampling posteriors compared against the network.
    Oracle {
        #[arg(long)]
        model: PathBuf,
        /// Signal volume whose voxels are the test signals; random prior draws when absent.
        #[arg(long)]
        signals: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Anisotropic MAE benchmark and uncertainty grids.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Synthetic test-retest repeatability study.
    Repeat {
        #[arg(long)]
        model: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Convert between the volume format and CSV, by file extension.
    Convert {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Volume kind recorded when reading CSV.
        #[arg(long, default_value = "signals")]
        kind: String,
    },
}

/// Resolves the configuration and runs the command on a sized worker pool.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.preset {
        cfg.train.preset = p;
    }
    cfg.validate()?;
    let workers = match (cli.deterministic, cli.workers) {
        (true, _) => 1,
        (false, Some(0)) => return Err(CliError::Usage("--workers must be >= 1".into())),
        (false, Some(n)) => n,
        (false, None) => 0,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))?;
    pool.install(|| commands::dispatch(&cfg, cli.command))
}
