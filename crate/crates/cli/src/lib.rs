//! `roar3d` command line: argument parsing and command dispatch.

pub mod commands;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod settings;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{CliError, CliResult, Failure};

#[derive(Debug, Parser)]
#[command(name = "roar3d", version, about = "Multi-view conditioned latent flow models on procedural shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags every command accepts.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Run config (TOML, or JSON by `.json` extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Routed,
    Concat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Comma-separated shape classes; overrides the config file.
        #[arg(long, value_delimiter = ',')]
        classes: Option<Vec<String>>,
    },
    /// Train the single-view model from scratch.
    TrainSingle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Build a multi-view model from a single-view checkpoint.
    Upgrade {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "routed")]
        variant: Variant,
    },
    /// Finetune a multi-view model.
    TrainMv {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Perturbation probability; overrides the config file.
        #[arg(long)]
        p_pert: Option<f64>,
    },
    /// Sample and decode one shape from its first K evaluation views.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 1)]
        views: usize,
        /// Also write the routing trace.
        #[arg(long)]
        trace: bool,
    },
    /// Evaluate on the test split for each view count.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated view counts; overrides the config file.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        views: Option<Vec<usize>>,
    },
    /// Consistency report from trace files, or from fresh test-split samples.
    AnalyzeRouter {
        #[command(flatten)]
        common: Common,
        /// `.rtrc` files or directories holding them.
        traces: Vec<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        data: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        /// View count for fresh samples (default: largest evaluation count).
        #[arg(long)]
        views: Option<usize>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    commands::dispatch(cli.command)
}
