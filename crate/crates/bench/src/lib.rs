//! Experiment runners behind the `dlon` binary. Each subcommand writes its
//! artifacts into a fresh output directory that only appears once complete.

pub mod artifacts;
pub mod commands;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use dlon_core::config::ConfigError;
use dlon_core::dataset::DatasetError;
use dlon_core::planner::{ModelChoice, PlannerError};
use dlon_core::sim::SimError;
use dlon_core::sysid::SysidError;

pub use commands::{cmd_bench, cmd_collect, cmd_eval_models, cmd_install, cmd_simulate, cmd_sysid};

pub const EXIT_INSTALL_FAILED: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;
const EXIT_OTHER: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("no dataset at {0} (run `dlon collect` first)")]
    MissingDataset(PathBuf),
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Config(ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    Planner(PlannerError),
    #[error("{0}")]
    Other(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Scenario(s) => CliError::Infeasible(s.to_string()),
            ConfigError::Io { path, source } => CliError::Io { path: path.into(), source },
            other => CliError::Config(other),
        }
    }
}

impl From<PlannerError> for CliError {
    fn from(e: PlannerError) -> Self {
        match e {
            PlannerError::Sim(SimError::GraspInfeasible { .. }) | PlannerError::ReceptacleCount { .. } => {
                CliError::Infeasible(e.to_string())
            }
            other => CliError::Planner(other),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        PlannerError::Sim(e).into()
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Io { .. } | CliError::MissingDataset(_) => EXIT_IO,
            CliError::Dataset(DatasetError::Io { .. }) => EXIT_IO,
            _ => EXIT_OTHER,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dlon", version, about = "Simulate, identify and install planar cable networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment file (TOML); the built-in easy scenario when omitted.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; replaced if an earlier run of this tool created it.
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted `key=value` override applied to the experiment file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Drag terminal 0 with a seeded constant twist and record the terminals.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5.0)]
        seconds: f64,
    },
    /// Record an excitation dataset.
    Collect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Fit a sparse polynomial model to a dataset and report R².
    Sysid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        lambda: f64,
        /// STLSQ threshold on RMS-scaled coefficients.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
    /// Open-loop prediction errors of the rigid, LS and composite models.
    EvalModels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Run the sequential installation on one scenario.
    Install {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<ModelChoice>,
    },
    /// Every scenario in a directory with both models and several seeds.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Directory holding easy.toml, rotated.toml, obstacles.toml and wall.toml.
        #[arg(long, default_value = "scenarios")]
        scenarios: PathBuf,
        /// Seeds 0..k per scenario and model; seed 0 is the authored start.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

/// Run one parsed command and return the process exit code.
pub fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate { common, seconds } => cmd_simulate(&common, seconds).map(|_| 0),
        Command::Collect { common, trajectories } => cmd_collect(&common, trajectories).map(|_| 0),
        Command::Sysid { common, dataset, lambda, threshold } => cmd_sysid(&common, &dataset, lambda, threshold).map(|_| 0),
        Command::EvalModels { common, dataset } => cmd_eval_models(&common, &dataset).map(|_| 0),
        Command::Install { common, model } => {
            let r = cmd_install(&common, model)?;
            Ok(if r.success { 0 } else { EXIT_INSTALL_FAILED })
        }
        Command::Bench { common, scenarios, seeds, jobs } => {
            let r = cmd_bench(&common, &scenarios, seeds, jobs)?;
            Ok(if r.all_succeeded() { 0 } else { EXIT_INSTALL_FAILED })
        }
    }
}
