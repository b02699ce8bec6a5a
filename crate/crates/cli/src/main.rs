//! `stlora` — reproducible forecasting-adaptation workflows.
//!
//! Subcommands: `gen-data`, `pretrain`, `adapt`, `eval`, `grad-check`,
//! `sweep`. Every command that takes a seed is deterministic under it, and
//! every run directory receives the fully resolved configuration it ran with.
//!
//! Exit codes: 0 success, 1 internal failure (or a failed gradient check),
//! 2 bad arguments, 3 I/O or file-format trouble, 4 training divergence,
//! 5 checkpoint/model mismatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use stlora_core::gradcheck::GradSizes;
use stlora_core::{Error, Result};

use stlora_cli::commands;
use stlora_cli::config::{load_config, resolve_seed, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "stlora", version, about = "Low-rank adaptation workflows for graph time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthesize a regime-switching graph dataset.
    GenData(GenDataArgs),
    /// Train a backbone from scratch and checkpoint it.
    Pretrain(PretrainArgs),
    /// Freeze a pretrained backbone and train low-rank corrections around it.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on the test slice of a dataset.
    Eval(EvalArgs),
    /// Verify analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Train one adaptation per (rank, layers, seed) cell and tabulate.
    Sweep(SweepArgs),
}

/// Flags shared by every training-flavoured command. Each one overrides the
/// matching config-file key; unset flags leave the file (or default) value.
#[derive(Debug, Args)]
struct Overrides {
    /// Flat JSON config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed (falls back to the config file, then $STLORA_SEED, then 7).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Input window length.
    #[arg(long)]
    in_len: Option<usize>,
    /// Forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
}

impl Overrides {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = Some(v);
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.step_size {
            cfg.step_size = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.in_len {
            cfg.in_len = v;
        }
        if let Some(v) = self.horizon {
            cfg.horizon = v;
        }
        cfg.seed = Some(resolve_seed(cfg.seed)?);
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 4000)]
    frames: usize,
    #[arg(long, default_value_t = 4)]
    regimes: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    /// Dataset file or directory.
    #[arg(long)]
    data: Option<String>,
    /// Backbone kind: shared-mlp or graph-conv.
    #[arg(long)]
    backbone: Option<String>,
    /// Backbone hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    #[arg(long)]
    data: Option<String>,
    /// Pretrained backbone checkpoint to freeze and adapt around.
    #[arg(long)]
    backbone_ckpt: PathBuf,
    /// Number of adaptation blocks.
    #[arg(long = "K", visible_alias = "blocks")]
    blocks: Option<usize>,
    /// Residual layers per block.
    #[arg(long = "L", visible_alias = "layers")]
    layers: Option<usize>,
    /// Rank of the low-rank corrections.
    #[arg(long)]
    rank: Option<usize>,
    /// Factorization: shared-core or per-node.
    #[arg(long)]
    variant: Option<String>,
    /// Initial correction gain.
    #[arg(long)]
    alpha: Option<f64>,
    /// Gain-norm penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Dropout on the correction branches.
    #[arg(long)]
    dropout: Option<f64>,
    /// Hidden width of the adaptation blocks.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<String>,
    /// Checkpoint to evaluate (its `.json` manifest must sit beside it).
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Check sizes as `nodes,dim,rank,len`.
    #[arg(long, default_value = "3,4,2,4")]
    sizes: GradSizes,
    /// Deliberately skew one analytic gradient; the check must then fail.
    /// A negative control for the checker itself.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    backbone_ckpt: PathBuf,
    /// Ranks to sweep.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16,32")]
    ranks: Vec<usize>,
    /// Layer counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    layers: Vec<usize>,
    /// Seeds; the full grid runs once per seed.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

fn error_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Dimension(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::Length(_) | Error::Data(_) => 3,
        Error::Divergence { .. } | Error::Numeric(_) => 4,
        Error::Checkpoint(_) => 5,
        Error::State(_) => 1,
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::GenData(a) => {
            let seed = resolve_seed(a.seed)?;
            commands::cmd_gen_data(a.nodes, a.frames, a.regimes, a.noise, seed, &a.out)?;
            Ok(0)
        }
        Cmd::Pretrain(a) => {
            let mut cfg = a.overrides.resolve()?;
            if let Some(v) = a.data {
                cfg.data = v;
            }
            if let Some(v) = a.backbone {
                cfg.backbone = v;
            }
            if let Some(v) = a.hidden {
                cfg.backbone_hidden = v;
            }
            commands::cmd_pretrain(&cfg, &a.out)?;
            Ok(0)
        }
        Cmd::Adapt(a) => {
            let mut cfg = a.overrides.resolve()?;
            if let Some(v) = a.data {
                cfg.data = v;
            }
            if let Some(v) = a.blocks {
                cfg.blocks = v;
            }
            if let Some(v) = a.layers {
                cfg.layers = v;
            }
            if let Some(v) = a.rank {
                cfg.rank = v;
            }
            if let Some(v) = a.variant {
                cfg.variant = v;
            }
            if let Some(v) = a.alpha {
                cfg.alpha = v;
            }
            if let Some(v) = a.lambda {
                cfg.lambda = v;
            }
            if let Some(v) = a.dropout {
                cfg.dropout = v;
            }
            if let Some(v) = a.hidden {
                cfg.hidden = v;
            }
            commands::cmd_adapt(&mut cfg, &a.backbone_ckpt, &a.out)?;
            Ok(0)
        }
        Cmd::Eval(a) => {
            let mut cfg = a.overrides.resolve()?;
            if let Some(v) = a.data {
                cfg.data = v;
            }
            commands::cmd_eval(&mut cfg, &a.ckpt, &a.out)?;
            Ok(0)
        }
        Cmd::GradCheck(a) => {
            let seed = resolve_seed(a.seed)?;
            let report = commands::cmd_grad_check(seed, a.sizes, a.inject_fault)?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Cmd::Sweep(a) => {
            let mut cfg = a.overrides.resolve()?;
            if let Some(v) = a.data {
                cfg.data = v;
            }
            let seeds = match a.seeds {
                Some(s) => s,
                None => vec![cfg.seed.expect("seed resolved above")],
            };
            commands::cmd_sweep(&cfg, &a.backbone_ckpt, &a.ranks, &a.layers, &seeds, &a.out)?;
            Ok(0)
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_code(&e)
        }
    };
    std::process::exit(code);
}
