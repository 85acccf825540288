//! `xattnlab` — experiment driver for the cross-attention transfer
//! laboratory. Eight subcommands take a flat key=value config plus explicit
//! input paths, write all artifacts into one output directory each, and
//! emit machine-readable metrics. Everything is seeded; reruns reproduce
//! outputs byte for byte.
//!
//! Exit codes: 0 success, 2 usage error, 3 contract/data error, 4 a
//! correctness check failed.

mod commands;
mod config;
mod metrics;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or config: exit 2.
    Usage(String),
    /// The library refused the operation: exit 3.
    Core(xattnlab_core::Error),
    /// A correctness check ran and failed: exit 4.
    Check(String),
}

impl From<xattnlab_core::Error> for CliError {
    fn from(e: xattnlab_core::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Parser)]
#[command(name = "xattnlab", version, about = "Desk-scale transfer-learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Flat key=value config file; defaults cover every key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts, resolved config, and metrics.
    #[arg(long)]
    out: PathBuf,
    /// Override the seed the subcommand draws from.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus (translation or denoising).
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a parent model from scratch on a generated corpus.
    TrainParent {
        #[command(flatten)]
        common: Common,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune children of a parent under one regime or all of them.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Directory produced by gen-data (the child task).
        #[arg(long)]
        data: PathBuf,
        /// Full parent checkpoint.
        #[arg(long)]
        parent: PathBuf,
        /// Regime name, or "all" for the sweep.
        #[arg(long)]
        regime: Option<String>,
        /// Transfer side: source or target.
        #[arg(long)]
        side: Option<String>,
    },
    /// Embedding surgery: restore parent embeddings or compose zero-shot.
    Compose {
        #[command(flatten)]
        common: Common,
        /// restore | zero-shot
        #[arg(long)]
        mode: String,
        /// Full parent checkpoint.
        #[arg(long)]
        parent: PathBuf,
        /// Child delta (restore mode).
        #[arg(long)]
        delta: Option<PathBuf>,
        /// New-source child delta (zero-shot mode).
        #[arg(long)]
        source_delta: Option<PathBuf>,
        /// New-target child delta (zero-shot mode).
        #[arg(long)]
        target_delta: Option<PathBuf>,
        /// Skip the regime/side/lineage guards (architecture is always checked).
        #[arg(long)]
        allow_mismatch: bool,
    },
    /// BLEU of a checkpoint on one corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory produced by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// train | dev | test
        #[arg(long)]
        split: String,
        /// Full checkpoint to evaluate.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Delta checkpoint to evaluate (needs --parent).
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Parent checkpoint the delta applies to.
        #[arg(long)]
        parent: Option<PathBuf>,
    },
    /// Induce a bilingual lexicon between child and parent embeddings.
    Lexicon {
        #[command(flatten)]
        common: Common,
        /// Child checkpoint (full or delta).
        #[arg(long)]
        child: PathBuf,
        /// Full parent checkpoint.
        #[arg(long)]
        parent: PathBuf,
        /// Embedding side to compare: source or target.
        #[arg(long)]
        side: Option<String>,
    },
    /// Storage accounting per regime for the configured model.
    Params {
        #[command(flatten)]
        common: Common,
        /// Transfer side: source or target.
        #[arg(long)]
        side: Option<String>,
    },
    /// Finite-difference verification of every op and the full model loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negative control: corrupt one analytic gradient coordinate by
        /// this amount; the check must then fail (exit 4).
        #[arg(long)]
        perturb_grad: Option<f64>,
    },
}

/// Load the config and apply the common overrides. `seed_key` names the
/// config key the subcommand's --seed flag overrides.
fn resolve(common: &Common, seed_key: &str) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.set(seed_key, seed.to_string());
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::GenData { common } => {
            let cfg = resolve(&common, "data.seed")?;
            commands::gen_data(cfg, &common.out)
        }
        Cmd::TrainParent { common, data } => {
            let cfg = resolve(&common, "seed")?;
            commands::train_parent(cfg, &common.out, &data)
        }
        Cmd::Finetune { common, data, parent, regime, side } => {
            let mut cfg = resolve(&common, "seed")?;
            if let Some(r) = regime {
                cfg.set("regime", r);
            }
            if let Some(s) = side {
                cfg.set("side", s);
            }
            commands::finetune(cfg, &common.out, &data, &parent)
        }
        Cmd::Compose { common, mode, parent, delta, source_delta, target_delta, allow_mismatch } => {
            let cfg = resolve(&common, "seed")?;
            let args = match mode.as_str() {
                "restore" => commands::ComposeArgs::Restore {
                    delta: delta.ok_or_else(|| {
                        CliError::Usage("restore mode needs --delta".into())
                    })?,
                    parent,
                },
                "zero-shot" => commands::ComposeArgs::ZeroShot {
                    source_delta: source_delta.ok_or_else(|| {
                        CliError::Usage("zero-shot mode needs --source-delta".into())
                    })?,
                    target_delta: target_delta.ok_or_else(|| {
                        CliError::Usage("zero-shot mode needs --target-delta".into())
                    })?,
                    parent,
                    allow_mismatch,
                },
                other => {
                    return Err(CliError::Usage(format!(
                        "--mode must be restore or zero-shot, got {other:?}"
                    )))
                }
            };
            commands::compose(cfg, &common.out, args)
        }
        Cmd::Eval { common, data, split, model, delta, parent } => {
            let cfg = resolve(&common, "seed")?;
            commands::eval(cfg, &common.out, commands::EvalArgs { data, split, model, delta, parent })
        }
        Cmd::Lexicon { common, child, parent, side } => {
            let mut cfg = resolve(&common, "seed")?;
            if let Some(s) = side {
                cfg.set("side", s);
            }
            commands::lexicon(cfg, &common.out, &child, &parent)
        }
        Cmd::Params { common, side } => {
            let mut cfg = resolve(&common, "seed")?;
            if let Some(s) = side {
                cfg.set("side", s);
            }
            commands::params(cfg, &common.out)
        }
        Cmd::Gradcheck { common, perturb_grad } => {
            let cfg = resolve(&common, "seed")?;
            commands::gradcheck(cfg, &common.out, perturb_grad)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(CliError::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
