//! The experiment configuration: one flat JSON document holding every knob.
//!
//! Precedence, highest first: command-line flag, config-file value, the
//! `STLORA_SEED` environment variable (seed only), built-in default. The
//! fully resolved document is echoed into each run directory as
//! `config.json` so any run can be reproduced from its own output.

use std::path::Path;

use serde::{Deserialize, Serialize};

use stlora_core::{Error, Result};

/// Seed used when neither flag, file, nor environment provides one.
pub const DEFAULT_SEED: u64 = 7;

/// Environment variable consulted for a default seed.
pub const SEED_ENV_VAR: &str = "STLORA_SEED";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset file or directory (a directory is expected to hold `data.stsd`).
    pub data: String,
    /// Backbone kind: `shared-mlp` or `graph-conv`.
    pub backbone: String,
    /// Hidden width of the backbone.
    pub backbone_hidden: usize,
    /// Input window length.
    pub in_len: usize,
    /// Forecast horizon.
    pub horizon: usize,
    /// Number of adaptation blocks.
    pub blocks: usize,
    /// Residual layers per block.
    pub layers: usize,
    /// Rank of the per-node low-rank corrections.
    pub rank: usize,
    /// Correction factorization: `shared-core` or `per-node`.
    pub variant: String,
    /// Initial correction gain.
    pub alpha: f64,
    /// Weight of the gain-norm penalty in the adaptation loss.
    pub lambda: f64,
    /// Dropout probability on the correction branches.
    pub dropout: f64,
    /// Hidden width of the adaptation blocks.
    pub hidden: usize,
    /// Base learning rate.
    pub lr: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Epochs between learning-rate drops.
    pub step_size: usize,
    /// Multiplier applied at each learning-rate drop.
    pub gamma: f64,
    /// Training epochs.
    pub epochs: usize,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// RNG seed; `None` in a file defers to the environment or the default.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            data: "data".to_string(),
            backbone: "shared-mlp".to_string(),
            backbone_hidden: 256,
            in_len: 12,
            horizon: 12,
            blocks: 1,
            layers: 4,
            rank: 16,
            variant: "shared-core".to_string(),
            alpha: 1.0,
            lambda: 1e-4,
            dropout: stlora_core::nn::DEFAULT_DROPOUT,
            hidden: 64,
            lr: 1e-3,
            weight_decay: 5e-4,
            step_size: 10,
            gamma: 0.1,
            epochs: 30,
            batch_size: 16,
            seed: None,
        }
    }
}

/// Deserializes a config file over the defaults. Unknown keys are rejected;
/// keys absent from the file keep their default values.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    // Layer the file onto the defaults: serialize the defaults, merge the
    // file's keys over them, then deserialize strictly.
    let mut base = match serde_json::to_value(ExperimentConfig::default()) {
        Ok(serde_json::Value::Object(m)) => m,
        _ => return Err(Error::State("default config did not serialize to an object".to_string())),
    };
    let overlay: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: not valid JSON: {e}", path.display())))?;
    let overlay = match overlay {
        serde_json::Value::Object(m) => m,
        other => {
            return Err(Error::Config(format!(
                "{}: config must be a flat JSON object, got {other}",
                path.display()
            )))
        }
    };
    for (k, v) in overlay {
        base.insert(k, v);
    }
    serde_json::from_value(serde_json::Value::Object(base))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Final seed resolution: explicit value, else `STLORA_SEED`, else 7.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text.parse::<u64>().map_err(|_| {
            Error::Argument(format!("{SEED_ENV_VAR} must be an unsigned integer, got `{text}`"))
        }),
        Err(_) => Ok(DEFAULT_SEED),
    }
}

/// Writes the fully resolved config into the run directory.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::State(format!("config serialization failed: {e}")))?;
    std::fs::write(dir.join("config.json"), text + "\n")?;
    Ok(())
}
