//! Architecture manifests stored beside checkpoints.
//!
//! A checkpoint holds named tensors only; the manifest (`<ckpt>.json`)
//! records the architecture those tensors belong to, so `eval`, `adapt`
//! and `sweep` can rebuild the exact model before loading the weights.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use stlora_core::backbone::{BackboneConfig, BackboneKind, BackboneNet};
use stlora_core::fusion::{StLoraConfig, StLoraModel};
use stlora_core::nall::NallVariant;
use stlora_core::{Error, Result};

use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    /// `backbone` for a bare backbone, `fused` for an adapted model.
    pub model: String,
    pub backbone: String,
    pub backbone_hidden: usize,
    pub in_len: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub feat_dim: usize,
    /// Adaptation fields; present only on fused manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

/// The manifest path for a checkpoint: the checkpoint path with `.json`
/// appended (`backbone.stck` -> `backbone.stck.json`).
pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

pub fn backbone_manifest(cfg: &BackboneConfig) -> ModelManifest {
    ModelManifest {
        model: "backbone".to_string(),
        backbone: cfg.kind.as_str().to_string(),
        backbone_hidden: cfg.hidden_dim,
        in_len: cfg.in_len,
        horizon: cfg.horizon,
        num_nodes: cfg.num_nodes,
        feat_dim: cfg.feat_dim,
        blocks: None,
        layers: None,
        rank: None,
        variant: None,
        alpha: None,
        lambda: None,
        dropout: None,
        hidden: None,
    }
}

pub fn fused_manifest(bb: &BackboneConfig, ad: &StLoraConfig) -> ModelManifest {
    let mut m = backbone_manifest(bb);
    m.model = "fused".to_string();
    m.blocks = Some(ad.blocks);
    m.layers = Some(ad.layers);
    m.rank = Some(ad.rank);
    m.variant = Some(ad.variant.as_str().to_string());
    m.alpha = Some(ad.alpha);
    m.lambda = Some(ad.lambda);
    m.dropout = Some(ad.dropout_p);
    m.hidden = Some(ad.hidden_dim);
    m
}

pub fn save_manifest(m: &ModelManifest, ckpt: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m)
        .map_err(|e| Error::State(format!("manifest serialization failed: {e}")))?;
    std::fs::write(manifest_path(ckpt), text + "\n")?;
    Ok(())
}

pub fn load_manifest(ckpt: &Path) -> Result<ModelManifest> {
    let path = manifest_path(ckpt);
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Checkpoint(format!("{}: not a model manifest: {e}", path.display()))
    })
}

impl ModelManifest {
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let kind = BackboneKind::from_str(&self.backbone)?;
        let mut cfg = BackboneConfig::new(kind, self.feat_dim, self.in_len, self.horizon, self.num_nodes);
        cfg.hidden_dim = self.backbone_hidden;
        Ok(cfg)
    }

    fn adaptation_config(&self) -> Result<StLoraConfig> {
        let missing = |field: &str| {
            Error::Checkpoint(format!("fused manifest is missing the `{field}` field"))
        };
        Ok(StLoraConfig {
            blocks: self.blocks.ok_or_else(|| missing("blocks"))?,
            hidden_dim: self.hidden.ok_or_else(|| missing("hidden"))?,
            layers: self.layers.ok_or_else(|| missing("layers"))?,
            rank: self.rank.ok_or_else(|| missing("rank"))?,
            variant: NallVariant::from_str(self.variant.as_deref().ok_or_else(|| missing("variant"))?)?,
            alpha: self.alpha.ok_or_else(|| missing("alpha"))?,
            lambda: self.lambda.ok_or_else(|| missing("lambda"))?,
            dropout_p: self.dropout.ok_or_else(|| missing("dropout"))?,
            ..StLoraConfig::default()
        })
    }

    /// Rebuilds a bare backbone with fresh weights; the checkpoint load that
    /// follows replaces every value, so the seed here is immaterial.
    pub fn build_backbone(&self, edges: &[(usize, usize, f64)]) -> Result<BackboneNet> {
        if self.model != "backbone" {
            return Err(Error::Checkpoint(format!(
                "expected a backbone checkpoint, manifest says `{}`",
                self.model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        BackboneNet::build(self.backbone_config()?, Some(edges), &mut rng)
    }

    /// Rebuilds the fused model around a frozen backbone shell.
    pub fn build_fused(&self, edges: &[(usize, usize, f64)]) -> Result<StLoraModel> {
        if self.model != "fused" {
            return Err(Error::Checkpoint(format!(
                "expected a fused checkpoint, manifest says `{}`",
                self.model
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut backbone = BackboneNet::build(self.backbone_config()?, Some(edges), &mut rng)?;
        backbone.set_frozen(true);
        StLoraModel::build(backbone, self.adaptation_config()?, &mut rng)
    }
}

/// Populates a config's geometry knobs from a manifest so that evaluation
/// always runs with the geometry the checkpoint was trained for.
pub fn apply_manifest_geometry(cfg: &mut ExperimentConfig, m: &ModelManifest) {
    cfg.backbone = m.backbone.clone();
    cfg.backbone_hidden = m.backbone_hidden;
    cfg.in_len = m.in_len;
    cfg.horizon = m.horizon;
    if let Some(b) = m.blocks {
        cfg.blocks = b;
    }
    if let Some(l) = m.layers {
        cfg.layers = l;
    }
    if let Some(r) = m.rank {
        cfg.rank = r;
    }
    if let Some(v) = &m.variant {
        cfg.variant = v.clone();
    }
    if let Some(a) = m.alpha {
        cfg.alpha = a;
    }
    if let Some(l) = m.lambda {
        cfg.lambda = l;
    }
    if let Some(d) = m.dropout {
        cfg.dropout = d;
    }
    if let Some(h) = m.hidden {
        cfg.hidden = h;
    }
}
