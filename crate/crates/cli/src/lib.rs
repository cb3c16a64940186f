//! The `rfmpose` command-line driver: data generation, flow training, PPO
//! refinement, evaluation and ablations, each writing a config echo and a
//! manifest next to its results.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::CliError;
pub use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "rfmpose", version, about = "Flow-matching pose estimation pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed and RFMPOSE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `section.key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory; overrides `paths.out`.
    #[arg(long, short, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    Grid,
    Ranking,
    FlowVsRl,
    Speed,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Grid => "grid",
            Ablation::Ranking => "ranking",
            Ablation::FlowVsRl => "flow_vs_rl",
            Ablation::Speed => "speed",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Sampling policy checkpoint (a flow checkpoint also works).
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Critic checkpoint.
    #[arg(long)]
    pub critic: Option<PathBuf>,
    /// Test dataset.
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the velocity field by flow matching.
    TrainFlow {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Refine a flow checkpoint with PPO and train the critic.
    TrainPpo {
        #[arg(long)]
        flow: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate one aggregation strategy on a test set.
    Eval {
        #[command(flatten)]
        models: ModelArgs,
        /// mean, value-top, random-single, random-top or oracle-top;
        /// defaults to value-top with a critic and mean without.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Run one ablation study.
    Ablate {
        #[arg(value_enum)]
        which: Ablation,
        #[command(flatten)]
        models: ModelArgs,
        /// Flow checkpoint for the flow-vs-rl comparison.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> String {
        match self {
            Command::GenData { .. } => "gen-data".into(),
            Command::TrainFlow { .. } => "train-flow".into(),
            Command::TrainPpo { .. } => "train-ppo".into(),
            Command::Eval { .. } => "eval".into(),
            Command::Ablate { which, .. } => format!("ablate-{}", which.name()),
        }
    }
}

/// Runs a parsed command line; `env_seed` is the value of `RFMPOSE_SEED`.
pub fn run(cli: Cli, env_seed: Option<String>) -> Result<Manifest, CliError> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref(), env_seed.as_deref(), &cli.global.sets)?;
    if let Some(seed) = cli.global.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        cfg.paths.out = Some(out.clone());
    }
    cfg.validate()?;
    with_workers(cli.global.workers, || {
        commands::dispatch(&cli.command, &cfg, cli.global.config.as_deref(), cli.global.deterministic)
    })
}

#[cfg(feature = "parallel")]
fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    match workers {
        Some(0) => Err(CliError::Config("--workers must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("worker pool: {e}")))?
            .install(f),
        None => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T, CliError> + Send,
) -> Result<T, CliError> {
    if workers.is_some_and(|n| n > 1) {
        log::warn!("built without the parallel feature; --workers ignored");
    }
    f()
}

pub fn current_workers() -> usize {
    #[cfg(feature = "parallel")]
    return rayon::current_num_threads();
    #[cfg(not(feature = "parallel"))]
    1
}
