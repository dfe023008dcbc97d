//! `fdn`: synthesize data, train, pretrain, transfer, ablate and evaluate
//! wrench forecasters from the command line.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 when a run fails.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Misuse of the command line or the config file.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Parser, Debug)]
#[command(name = "fdn", version, about = "Probabilistic wrench forecasting from proprioception")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    args: Args,
}

#[derive(clap::Args, Debug, Default)]
pub struct Args {
    /// Sectioned `key = value` config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (evaluate and plot default to the checkpoint seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Episode count for `synth`; episode directory for every other command.
    #[arg(long, global = true)]
    pub episodes: Option<String>,
    /// Comma-separated delays in milliseconds.
    #[arg(long, global = true)]
    pub delays: Option<String>,
    /// Comma-separated ablation flags.
    #[arg(long, global = true)]
    pub flags: Option<String>,
    /// Final transfer stage: linear_probe or fine_tune.
    #[arg(long, global = true)]
    pub stage: Option<String>,
    /// Percentage of pretraining episodes to use.
    #[arg(long = "data-util", global = true)]
    pub data_util: Option<f64>,
    /// Checkpoint directory.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Train a baseline instead of the FDN: point_mlp, seq2seq_patch or seq2seq_patch_gaussian.
    #[arg(long, global = true)]
    pub baseline: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate synthetic episodes.
    Synth,
    /// Denoise episodes and estimate joint derivatives.
    Preprocess,
    /// Train a model from scratch on the training split.
    Train,
    /// Masked pretraining on a surrogate corpus.
    Pretrain,
    /// Linear probe and fine-tuning from a pretraining checkpoint.
    Transfer,
    /// Score a checkpoint on the held-out split.
    Evaluate,
    /// Train and evaluate one model per ablation flag.
    Ablate,
    /// Wrench energy spectrum of an episode directory.
    Spectrum,
    /// Reconstruction overlays of the first held-out episode.
    Plot,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Train => "train",
            Command::Pretrain => "pretrain",
            Command::Transfer => "transfer",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Spectrum => "spectrum",
            Command::Plot => "plot",
        }
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = config::RawConfig::load(cli.args.config.as_deref())?;
    let ctx = commands::Ctx { args: &cli.args, cfg };
    match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Train => commands::train_cmd(&ctx),
        Command::Pretrain => commands::pretrain_cmd(&ctx),
        Command::Transfer => commands::transfer_cmd(&ctx),
        Command::Evaluate => commands::evaluate_cmd(&ctx),
        Command::Ablate => commands::ablate(&ctx),
        Command::Spectrum => commands::spectrum(&ctx),
        Command::Plot => commands::plot(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.chain().any(|c| c.is::<UsageError>());
            eprintln!("error in {}: {e:#}", cli.command.name());
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
