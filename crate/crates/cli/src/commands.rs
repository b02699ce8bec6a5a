//! The six workflow commands. Each one owns its I/O layout: a run directory
//! receives the resolved `config.json` plus the tables and checkpoints that
//! command produces, and nothing writes outside its `--out`.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use stlora_core::backbone::{BackboneConfig, BackboneKind, BackboneNet};
use stlora_core::data::{
    generate_synthetic, load_dataset, prepare, save_dataset, GraphSignalDataset, PreparedData,
    SplitSpec,
};
use stlora_core::fusion::{StLoraConfig, StLoraModel};
use stlora_core::gradcheck::{run_grad_check, GradCheckReport, GradSizes};
use stlora_core::nall::NallVariant;
use stlora_core::train::checkpoint::{load_checkpoint_into, save_checkpoint};
use stlora_core::train::metrics::{evaluate, MetricsReport};
use stlora_core::train::{lr_at, train, LrSchedule, Phase, TrainConfig};
use stlora_core::{Error, Result};

use crate::config::{echo_config, ExperimentConfig};
use crate::manifest::{
    apply_manifest_geometry, backbone_manifest, fused_manifest, load_manifest, save_manifest,
    ModelManifest,
};
use crate::report::{
    fmt_f64, write_csv, write_delta_csv, write_metrics_csv, write_params_csv, write_training_csv,
};

/// A `--data` value may point at the dataset file itself or at a directory
/// holding `data.stsd` (the layout `gen-data` produces).
pub fn dataset_file(data: &str) -> PathBuf {
    let path = PathBuf::from(data);
    if path.is_dir() {
        path.join("data.stsd")
    } else {
        path
    }
}

fn load_data(cfg: &ExperimentConfig) -> Result<GraphSignalDataset> {
    load_dataset(&dataset_file(&cfg.data))
}

/// The fixed evaluation protocol: chronological 6:2:2 split, normalization
/// fitted on the training slice only.
fn prepared(cfg: &ExperimentConfig, ds: &GraphSignalDataset) -> Result<PreparedData> {
    let split = SplitSpec::new(0.6, 0.2, 0.2)?;
    prepare(ds, &split, cfg.in_len, cfg.horizon)
}

fn train_config(cfg: &ExperimentConfig, phase: Phase, seed: u64) -> TrainConfig {
    TrainConfig {
        phase,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed,
        schedule: LrSchedule {
            base_lr: cfg.lr,
            step_size: cfg.step_size,
            gamma: cfg.gamma,
        },
        weight_decay: cfg.weight_decay,
    }
}

fn backbone_config(cfg: &ExperimentConfig, data: &PreparedData) -> Result<BackboneConfig> {
    let kind = BackboneKind::from_str(&cfg.backbone)?;
    let mut bb = BackboneConfig::new(kind, data.feat_dim, cfg.in_len, cfg.horizon, data.num_nodes);
    bb.hidden_dim = cfg.backbone_hidden;
    Ok(bb)
}

fn adaptation_config(cfg: &ExperimentConfig) -> Result<StLoraConfig> {
    Ok(StLoraConfig {
        blocks: cfg.blocks,
        hidden_dim: cfg.hidden,
        layers: cfg.layers,
        rank: cfg.rank,
        variant: NallVariant::from_str(&cfg.variant)?,
        alpha: cfg.alpha,
        lambda: cfg.lambda,
        dropout_p: cfg.dropout,
        ..StLoraConfig::default()
    })
}

fn require_seed(cfg: &ExperimentConfig) -> Result<u64> {
    cfg.seed
        .ok_or_else(|| Error::State("seed was not resolved before running".to_string()))
}

#[derive(Debug, Serialize)]
struct GenMetadata {
    nodes: usize,
    frames: usize,
    regimes: usize,
    noise: f64,
    seed: u64,
    feat_dim: usize,
}

pub fn cmd_gen_data(
    nodes: usize,
    frames: usize,
    regimes: usize,
    noise: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ds = generate_synthetic(nodes, frames, regimes, noise, seed)?;
    std::fs::create_dir_all(out)?;
    // Writes the signal file plus its adjacency and free-text sidecars.
    save_dataset(&ds, &out.join("data.stsd"))?;

    let meta = GenMetadata {
        nodes,
        frames,
        regimes,
        noise,
        seed,
        feat_dim: ds.feat_dim(),
    };
    let text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::State(format!("metadata serialization failed: {e}")))?;
    std::fs::write(out.join("metadata.json"), text + "\n")?;

    println!(
        "generated {} frames x {} nodes ({} edges) into {}",
        ds.steps(),
        ds.num_nodes(),
        ds.edges.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = require_seed(cfg)?;
    let ds = load_data(cfg)?;
    let data = prepared(cfg, &ds)?;
    let bb_cfg = backbone_config(cfg, &data)?;

    std::fs::create_dir_all(out)?;
    echo_config(cfg, out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = BackboneNet::build(bb_cfg.clone(), Some(&data.edges), &mut rng)?;
    let tc = train_config(cfg, Phase::Pretrain, seed);
    let log = train(&mut backbone, &data.train, &data.val, &tc)?;
    write_training_csv(&out.join("training.csv"), &log, lr_at(&tc.schedule, 0))?;

    let ckpt = out.join("backbone.stck");
    save_checkpoint(&backbone, &ckpt)?;
    save_manifest(&backbone_manifest(&bb_cfg), &ckpt)?;

    let report = evaluate(&backbone, &data.test, &data.stats)?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    write_params_csv(&out.join("params.csv"), &report)?;

    println!(
        "pretrained {} for {} epochs (best epoch {}, val MAE {:.6}); test avg MAE {:.6}",
        cfg.backbone, cfg.epochs, log.best_epoch, log.best_val_mae, report.average.mae
    );
    Ok(())
}

pub fn cmd_adapt(cfg: &mut ExperimentConfig, backbone_ckpt: &Path, out: &Path) -> Result<()> {
    let seed = require_seed(cfg)?;
    let m = load_manifest(backbone_ckpt)?;
    // The backbone fixes the geometry; the echoed config reflects that.
    apply_manifest_geometry(cfg, &m);
    let ds = load_data(cfg)?;
    let data = prepared(cfg, &ds)?;

    std::fs::create_dir_all(out)?;
    echo_config(cfg, out)?;

    let mut backbone = m.build_backbone(&data.edges)?;
    load_checkpoint_into(&mut backbone, backbone_ckpt)?;
    let frozen_report = evaluate(&backbone, &data.test, &data.stats)?;
    backbone.set_frozen(true);

    let ad_cfg = adaptation_config(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StLoraModel::build(backbone, ad_cfg.clone(), &mut rng)?;
    let tc = train_config(cfg, Phase::Adapt, seed);
    let log = train(&mut model, &data.train, &data.val, &tc)?;
    write_training_csv(&out.join("training.csv"), &log, lr_at(&tc.schedule, 0))?;

    let ckpt = out.join("adapted.stck");
    save_checkpoint(&model, &ckpt)?;
    save_manifest(&fused_manifest(&m.backbone_config()?, &ad_cfg), &ckpt)?;

    let report = evaluate(&model, &data.test, &data.stats)?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    write_delta_csv(&out.join("delta.csv"), &report, &frozen_report)?;
    write_params_csv(&out.join("params.csv"), &report)?;

    println!(
        "adapted for {} epochs (best epoch {}); test avg MAE {:.6} vs frozen {:.6} \
         ({} adaptation params, {:.3}% of the backbone)",
        cfg.epochs,
        log.best_epoch,
        report.average.mae,
        frozen_report.average.mae,
        report.params.adaptation_params,
        report.params.overhead_percent
    );
    Ok(())
}

/// Loads whichever model a manifest describes and runs the shared protocol
/// evaluation on the test slice.
fn eval_checkpoint(
    cfg: &ExperimentConfig,
    m: &ModelManifest,
    ckpt: &Path,
) -> Result<(MetricsReport, PreparedData)> {
    let ds = load_data(cfg)?;
    let data = prepared(cfg, &ds)?;
    let report = match m.model.as_str() {
        "backbone" => {
            let mut model = m.build_backbone(&data.edges)?;
            load_checkpoint_into(&mut model, ckpt)?;
            evaluate(&model, &data.test, &data.stats)?
        }
        "fused" => {
            let mut model = m.build_fused(&data.edges)?;
            load_checkpoint_into(&mut model, ckpt)?;
            evaluate(&model, &data.test, &data.stats)?
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "manifest names an unknown model kind `{other}`"
            )))
        }
    };
    Ok((report, data))
}

pub fn cmd_eval(cfg: &mut ExperimentConfig, ckpt: &Path, out: &Path) -> Result<()> {
    let m = load_manifest(ckpt)?;
    apply_manifest_geometry(cfg, &m);

    std::fs::create_dir_all(out)?;
    echo_config(cfg, out)?;

    let (report, _) = eval_checkpoint(cfg, &m, ckpt)?;
    write_metrics_csv(&out.join("metrics.csv"), &report)?;
    write_params_csv(&out.join("params.csv"), &report)?;

    println!(
        "evaluated {}: test avg MAE {:.6}, RMSE {:.6}",
        ckpt.display(),
        report.average.mae,
        report.average.rmse
    );
    Ok(())
}

pub fn cmd_grad_check(seed: u64, sizes: GradSizes, inject_fault: bool) -> Result<GradCheckReport> {
    let report = run_grad_check(seed, sizes, inject_fault)?;
    println!("component,params_checked,max_rel_err");
    for row in &report.rows {
        println!("{},{},{:e}", row.component, row.params_checked, row.max_rel_err);
    }
    println!(
        "tolerance {:e}: {}",
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(report)
}

pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    backbone_ckpt: &Path,
    ranks: &[usize],
    layers: &[usize],
    seeds: &[u64],
    out: &Path,
) -> Result<()> {
    if ranks.is_empty() || layers.is_empty() || seeds.is_empty() {
        return Err(Error::Argument(
            "sweep needs at least one rank, one layer count and one seed".to_string(),
        ));
    }
    let m = load_manifest(backbone_ckpt)?;
    let mut cfg = cfg.clone();
    apply_manifest_geometry(&mut cfg, &m);
    let ds = load_data(&cfg)?;
    let data = prepared(&cfg, &ds)?;

    std::fs::create_dir_all(out)?;
    echo_config(&cfg, out)?;

    let mut rows = Vec::new();
    for &seed in seeds {
        for &rank in ranks {
            for &layer_count in layers {
                let started = Instant::now();
                let cell = sweep_cell(&cfg, &m, backbone_ckpt, &data, rank, layer_count, seed);
                let wall = started.elapsed().as_secs_f64();
                let (mae, rmse, params) = match cell {
                    Ok((report, params)) => (
                        fmt_f64(report.average.mae),
                        fmt_f64(report.average.rmse),
                        params.to_string(),
                    ),
                    Err(e) => {
                        log::warn!("sweep cell r={rank} L={layer_count} seed={seed} failed: {e}");
                        ("na".to_string(), "na".to_string(), "na".to_string())
                    }
                };
                rows.push(vec![
                    rank.to_string(),
                    layer_count.to_string(),
                    seed.to_string(),
                    mae,
                    rmse,
                    params,
                    format!("{wall:.3}"),
                ]);
            }
        }
    }
    write_csv(
        &out.join("sweep.csv"),
        &["r", "L", "seed", "avg_mae", "avg_rmse", "adaptation_params", "wall_seconds"],
        &rows,
    )?;
    println!("swept {} cells into {}", rows.len(), out.display());
    Ok(())
}

fn sweep_cell(
    cfg: &ExperimentConfig,
    m: &ModelManifest,
    backbone_ckpt: &Path,
    data: &PreparedData,
    rank: usize,
    layer_count: usize,
    seed: u64,
) -> Result<(MetricsReport, u64)> {
    let mut backbone = m.build_backbone(&data.edges)?;
    load_checkpoint_into(&mut backbone, backbone_ckpt)?;
    backbone.set_frozen(true);

    let mut cell_cfg = cfg.clone();
    cell_cfg.rank = rank;
    cell_cfg.layers = layer_count;
    let ad_cfg = adaptation_config(&cell_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = StLoraModel::build(backbone, ad_cfg, &mut rng)?;
    let params = model.adaptation_param_count();

    let tc = train_config(cfg, Phase::Adapt, seed);
    train(&mut model, &data.train, &data.val, &tc)?;
    let report = evaluate(&model, &data.test, &data.stats)?;
    Ok((report, params))
}
