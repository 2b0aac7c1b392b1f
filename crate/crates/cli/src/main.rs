//! `svae`: train, sample, evaluate and benchmark spatial VAEs.
//!
//! Exit codes: 0 success, 1 a check failed, 2 usage / configuration / I/O /
//! format error, 3 training diverged (non-finite loss or gradient).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "svae", version, about = "Spatial VAEs with matrix-variate normal latents")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override values from `--config`,
/// which override built-in defaults.
#[derive(Debug, Default, Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// original, naive, mvn or lowrank-mvn.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Latent feature-map side length.
    #[arg(long, global = true)]
    d: Option<usize>,
    /// Number of latent feature maps.
    #[arg(long = "n-maps", global = true)]
    n_maps: Option<usize>,
    /// Latent size of the vector (original) model.
    #[arg(long = "latent-dim", global = true)]
    latent_dim: Option<usize>,
    /// mnist, cifar10 or folder.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long = "data-dir", global = true, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Any config key, e.g. `--set likelihood_sigma=0.5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a run log and sample grids.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long = "learning-rate")]
        learning_rate: Option<f64>,
        #[arg(long = "checkpoint-every")]
        checkpoint_every: Option<usize>,
        /// Use only the first N training images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Sample from the prior, decode and write PNG grids.
    Generate {
        /// Defaults to `<out>/svae_final.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        /// Grid rows (and columns) per PNG.
        #[arg(long)]
        rows: Option<usize>,
    },
    /// Parzen-window log-likelihood of the test split.
    EvalParzen {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Model samples used as kernel centres.
        #[arg(long = "n-samples")]
        n_samples: Option<usize>,
        /// Score only the first N test images.
        #[arg(long = "n-test")]
        n_test: Option<usize>,
    },
    /// Time one training epoch and image generation for all four variants.
    Bench {
        #[arg(long = "n-generate")]
        n_generate: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
    },
    /// Run the built-in oracle suites.
    Check {
        /// Debug: perturb one analytic gradient (the gradient suite must fail).
        #[arg(long = "corrupt-gradient", hide = true)]
        corrupt_gradient: bool,
    },
}

pub enum Failure {
    Usage(String),
    CheckFailed,
    Diverged(String),
}

impl From<svae_core::SvaeError> for Failure {
    fn from(e: svae_core::SvaeError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<String> for Failure {
    fn from(e: String) -> Self {
        Failure::Usage(e)
    }
}

fn build_config(common: &Common, command: &Command) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    let mut push = |k: &'static str, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("seed", common.seed.map(|v| v.to_string()));
    push("variant", common.variant.clone());
    push("d", common.d.map(|v| v.to_string()));
    push("n_maps", common.n_maps.map(|v| v.to_string()));
    push("latent_dim", common.latent_dim.map(|v| v.to_string()));
    push("dataset", common.dataset.clone());
    push("data_dir", common.data_dir.as_ref().map(|p| p.display().to_string()));
    push("out", common.out.as_ref().map(|p| p.display().to_string()));
    match command {
        Command::Train {
            epochs,
            batch_size,
            learning_rate,
            checkpoint_every,
            limit,
        } => {
            push("epochs", epochs.map(|v| v.to_string()));
            push("batch_size", batch_size.map(|v| v.to_string()));
            push("learning_rate", learning_rate.map(|v| v.to_string()));
            push("checkpoint_every", checkpoint_every.map(|v| v.to_string()));
            push("train_limit", limit.map(|v| v.to_string()));
        }
        Command::Generate { count, rows, .. } => {
            push("count", count.map(|v| v.to_string()));
            push("grid_rows", rows.map(|v| v.to_string()));
        }
        Command::EvalParzen { n_samples, n_test, .. } => {
            push("n_model_samples", n_samples.map(|v| v.to_string()));
            push("n_test", n_test.map(|v| v.to_string()));
        }
        Command::Bench {
            n_generate,
            limit,
            batch_size,
        } => {
            push("n_generate", n_generate.map(|v| v.to_string()));
            push("train_limit", limit.map(|v| v.to_string()));
            push("batch_size", batch_size.map(|v| v.to_string()));
        }
        Command::Check { .. } => {}
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k, v)?;
    }
    for (k, v) in flags {
        cfg.set(k, &v).map_err(|e| format!("--{}: {e}", k.replace('_', "-")))?;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("SVAE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("SVAE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("cannot configure {n} worker threads: {e}"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let cfg = build_config(&cli.common, &cli.command)?;
    match cli.command {
        Command::Train { .. } => commands::train(&cfg),
        Command::Generate { checkpoint, .. } => commands::generate(&cfg, checkpoint),
        Command::EvalParzen { checkpoint, .. } => commands::eval_parzen(&cfg, checkpoint),
        Command::Bench { .. } => commands::bench(&cfg),
        Command::Check { corrupt_gradient } => commands::check(&cfg, corrupt_gradient),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CheckFailed) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Diverged(msg)) => {
            eprintln!("error: training diverged: {msg}");
            ExitCode::from(3)
        }
    }
}
