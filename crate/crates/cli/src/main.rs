//! `dipaco`: batch driver for the modular training pipeline.
//!
//! Every command works inside a run directory given by `--out`. Upstream
//! artifacts (corpora, base model, shards) live there and are rebuilt
//! whenever the config sections they depend on change.

mod commands;
mod config;
mod report;
mod workdir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dipaco_core::experiment::{RouterKind, TrainMode};

/// Environment variable selecting the log level (`error` .. `trace`).
pub const LOG_ENV: &str = "DIPACO_LOG";

#[derive(Parser)]
#[command(
    name = "dipaco",
    version,
    about = "Path-composed modular language model training"
)]
struct Cli {
    /// Override a config key, e.g. `--set plan.outer_steps=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, test and chunk-router corpora.
    MakeData(StageArgs),
    /// Train the dense base model whose features drive routing.
    Pretrain(StageArgs),
    /// Fit the generative router and write the document shards.
    Shard(ShardArgs),
    /// Train a modular model.
    Train(TrainArgs),
    /// Train through the simulated queue, worker pool and executors.
    Simulate(SimulateArgs),
    /// Routed perplexity of a trained run on the test corpus.
    Eval(EvalArgs),
    /// Collect metrics into one table on stdout.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct StageArgs {
    /// Experiment config; defaults to the one captured in the run directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ShardArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_router)]
    pub router: Option<RouterKind>,
    /// Paths to route to; clusters per level for the product router.
    #[arg(long)]
    pub k: Option<usize>,
    /// Paths each document is assigned to.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub overlap: Option<u8>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the last completed outer step.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fault plan (TOML).
    #[arg(long)]
    pub faults: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub executors: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of a `train` or `simulate` run.
    #[arg(long)]
    pub checkpoints: PathBuf,
    /// Tokens between re-routing decisions; 0 routes once per sequence.
    #[arg(long)]
    pub route_every: Option<usize>,
    /// Evaluate early-stopped checkpoints (`--early-stop false` for final).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub early_stop: Option<bool>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Directory searched recursively for `metrics.tsv` files.
    #[arg(long)]
    pub metrics: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub out: ReportFormat,
}

fn parse_router(s: &str) -> Result<RouterKind, String> {
    s.parse().map_err(|e: dipaco_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: dipaco_core::Error| e.to_string())
}

/// Exit status for a failed command: 2 for configuration problems, 3 for
/// everything that went wrong while running.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<config::ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<dipaco_core::Error>() {
            return if matches!(e, dipaco_core::Error::Config(_)) {
                2
            } else {
                3
            };
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => commands::make_data(&a, &cli.overrides),
        Command::Pretrain(a) => commands::pretrain(&a, &cli.overrides),
        Command::Shard(a) => commands::shard(&a, &cli.overrides),
        Command::Train(a) => commands::train(&a, &cli.overrides),
        Command::Simulate(a) => commands::simulate(&a, &cli.overrides),
        Command::Eval(a) => commands::eval(&a, &cli.overrides),
        Command::Report(a) => report::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
