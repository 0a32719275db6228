//! `qrnn`: train, prune, recover and evaluate QRNN language models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "qrnn",
    version,
    about = "Structured pruning for QRNN language models",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write a synthetic Markov corpus (train/valid/test.txt)
    GenCorpus(GenCorpusArgs),
    /// Train a baseline model from scratch
    TrainBaseline(TrainBaselineArgs),
    /// Collect mean activation statistics into a checkpoint
    CollectStats(CollectStatsArgs),
    /// Prune a model to a FLOPs target
    Prune(PruneArgs),
    /// Learn hard concrete gates on a frozen model
    TrainGates(TrainGatesArgs),
    /// Learn a rank-1 update for a pruned model
    TrainSru(TrainSruArgs),
    /// Report perplexity, recall at 3 and FLOPs
    Eval(EvalArgs),
    /// Time single-token predictions
    Bench(BenchArgs),
    /// Evaluate a grid of methods and FLOPs targets
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenCorpusArgs {
    #[arg(long)]
    out: PathBuf,
    /// Distinct words, excluding the two reserved tokens
    #[arg(long, default_value_t = 498)]
    words: usize,
    #[arg(long, default_value_t = 200_000)]
    train_tokens: usize,
    #[arg(long, default_value_t = 20_000)]
    valid_tokens: usize,
    #[arg(long, default_value_t = 20_000)]
    test_tokens: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ScheduleArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 5e-3)]
    lr: f64,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 35)]
    bptt: usize,
    /// Gradient-norm cap (0 disables)
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct TrainBaselineArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    vocab_cap: usize,
    /// Number of layers; must agree with --hidden when given
    #[arg(long)]
    layers: Option<usize>,
    /// Hidden sizes, one per layer; the last must equal --embed
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    embed: usize,
    /// Convolution window per layer
    #[arg(long, value_delimiter = ',', default_value = "2,1")]
    window: Vec<usize>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Log validation perplexity every N steps (0 disables)
    #[arg(long, default_value_t = 500)]
    eval_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CollectStatsArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Tokens from the start of the training split, or `all`
    #[arg(long, default_value = "all")]
    max_tokens: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    /// random, filter-norm, mean-activation or l0
    #[arg(long)]
    method: String,
    #[arg(long)]
    target_flops: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Checkpoint holding activation statistics (defaults to --model)
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Tag of the gate set to use for l0
    #[arg(long)]
    gates: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainGatesArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5.5e-4)]
    lambda: f64,
    /// Search λ to land near this FLOPs fraction instead of using --lambda
    #[arg(long)]
    target_flops: Option<f64>,
    /// λ search iterations when --target-flops is given
    #[arg(long, default_value_t = 6)]
    search_iters: usize,
    #[arg(long, default_value_t = 2.0)]
    init_log_alpha: f64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long, default_value = "default")]
    tag: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TrainSruArgs {
    /// A pruned checkpoint
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Stored element width: f32 or f16
    #[arg(long, default_value = "f32")]
    width: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Apply the stored rank-1 update for this model's mask
    #[arg(long)]
    sru: bool,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "valid")]
    split: String,
    /// Print the report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    sru: bool,
    /// Token source (test split); a fixed token sequence is used otherwise
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = qrnn_core::eval::DEFAULT_QUERIES)]
    queries: usize,
    #[arg(long, default_value_t = qrnn_core::eval::DEFAULT_WARMUP)]
    warmup: usize,
}

#[derive(Debug, Args, Serialize)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "random,filter-norm,mean-activation,l0"
    )]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.8,0.6")]
    targets: Vec<f64>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also train a rank-1 update for every pruned cell, for N steps
    #[arg(long, default_value_t = 0)]
    sru_steps: usize,
    /// Measure latency for every row
    #[arg(long)]
    bench: bool,
    #[arg(long, default_value_t = qrnn_core::eval::DEFAULT_QUERIES)]
    queries: usize,
    #[arg(long, default_value_t = qrnn_core::eval::DEFAULT_WARMUP)]
    warmup: usize,
    /// Test perplexity above which rows are flagged
    #[arg(long, default_value_t = qrnn_core::eval::DEFAULT_PPL_CEILING)]
    ceiling: f64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long)]
    out: PathBuf,
    /// JSON copy of the table (defaults to the CSV path with .json)
    #[arg(long)]
    json: Option<PathBuf>,
}

fn run() -> Result<(), CliError> {
    let args = config::expand(std::env::args().collect())?;
    let cli = Cli::try_parse_from(args).map_err(|e| {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            let _ = e.print();
            CliError::Exit
        } else {
            CliError::Config(
                e.to_string()
                    .trim_start_matches("error: ")
                    .trim_end()
                    .to_string(),
            )
        }
    })?;
    commands::dispatch(cli.command)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(()) | Err(CliError::Exit) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
