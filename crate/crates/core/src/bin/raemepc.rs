//! Command-line entry point. Exit codes: 0 success, 2 usage or
//! configuration problems, 3 numerical failures during training.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use raemepc::cli::{
    cmd_detect, cmd_evaluate, cmd_grid, cmd_synthesize, cmd_train, DetectArgs, EvaluateArgs,
};
use raemepc::config::load_run_config;
use raemepc::synth::SynthConfig;
use raemepc::{RaemepcError, Result};

#[derive(Parser)]
#[command(name = "raemepc", version, about = "Multi-resolution recurrent autoencoder for time-series anomaly detection")]
struct Cli {
    /// Run configuration (TOML). Required by train and grid.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Parallel workers for grid search.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model: writes checkpoint, residual Gaussian, and logs.
    Train,
    /// Exhaustive hyperparameter sweep; writes ranked results and the
    /// best checkpoint.
    Grid,
    /// Score a test series with a saved checkpoint.
    Detect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Residual Gaussian JSON; defaults to gaussian.json next to the
        /// checkpoint.
        #[arg(long)]
        gaussian: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        /// Ground-truth labels (one 0/1 per line) to embed in the CSV.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Anomaly threshold; adds a label column when given.
        #[arg(long)]
        threshold: Option<f64>,
        /// Inference stride; defaults to the training stride.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Compute AUROC/AUPRC/best-F1 for a scores CSV.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Label file; optional when the CSV has a true_label column.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Generate the synthetic sine dataset with injected anomalies.
    Synthesize {
        #[arg(long, default_value_t = 4096)]
        train_len: usize,
        #[arg(long, default_value_t = 2048)]
        test_len: usize,
        #[arg(long, default_value_t = 2)]
        dims: usize,
        #[arg(long, default_value_t = 0.05)]
        anomaly_fraction: f64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let out_dir = cli.out.clone();
    let need_config = || -> Result<_> {
        let path = cli.config.clone().ok_or_else(|| {
            RaemepcError::Config("--config is required for this command".into())
        })?;
        let mut cfg = load_run_config(&path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &out_dir {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    };

    match &cli.command {
        Command::Train => cmd_train(&need_config()?),
        Command::Grid => cmd_grid(&need_config()?, cli.jobs),
        Command::Detect {
            checkpoint,
            gaussian,
            test,
            labels,
            threshold,
            stride,
        } => cmd_detect(&DetectArgs {
            checkpoint: checkpoint.clone(),
            gaussian: gaussian.clone(),
            test: test.clone(),
            labels: labels.clone(),
            threshold: *threshold,
            stride: *stride,
            out_dir: out_dir.unwrap_or_else(|| PathBuf::from("out")),
        }),
        Command::Evaluate { scores, labels } => cmd_evaluate(&EvaluateArgs {
            scores: scores.clone(),
            labels: labels.clone(),
            out_dir: out_dir.unwrap_or_else(|| PathBuf::from("out")),
        })
        .map(|_| ()),
        Command::Synthesize {
            train_len,
            test_len,
            dims,
            anomaly_fraction,
        } => cmd_synthesize(
            &out_dir.unwrap_or_else(|| PathBuf::from("out")),
            &SynthConfig {
                train_len: *train_len,
                test_len: *test_len,
                dims: *dims,
                anomaly_fraction: *anomaly_fraction,
                noise_std: 0.05,
                seed: cli.seed.unwrap_or(42),
            },
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
