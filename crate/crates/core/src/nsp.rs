//! Node-specific predictor: a residual stack of node-adaptive low-rank
//! layers over a temporal-convolution stem, finished by a shared linear
//! read-out head.
//!
//! The hidden state evolves as `H^0 = stem(x)` and
//! `H^l = H^{l-1} + NALL^l(sigma(H^{l-1}))` where `sigma` is
//! RMS-normalization, leaky ReLU, then dropout. Every NALL here wraps a
//! frozen all-zero base map, and its up-projection starts at zero too, so a
//! freshly built stack is an exact identity on the stem output: residual
//! refinement begins from nothing and is learned entirely during adaptation.
//!
//! The head flattens each node's `in_len x hidden_dim` trajectory and maps it
//! with one shared affine layer to `horizon x out_dim`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nall::{nall_init, nall_param_count, NallConfig, NallParams, NallVariant};
use crate::nn::{
    dropout_forward, linear_forward, rmsnorm_forward, temporal_conv_forward, LinearParams,
    RmsNormParams, TemporalConvParams,
};
use crate::tensor::{Param, Parameterized, Tape, Tensor, LEAKY_SLOPE};

#[derive(Debug, Clone)]
pub struct NspConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub in_len: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub rank: usize,
    pub kernel_size: usize,
    pub dropout_p: f64,
    pub variant: NallVariant,
    pub alpha: f64,
    pub alpha_learnable: bool,
}

impl NspConfig {
    pub fn new(in_dim: usize, out_dim: usize, in_len: usize, horizon: usize, num_nodes: usize) -> NspConfig {
        NspConfig {
            in_dim,
            out_dim,
            in_len,
            horizon,
            num_nodes,
            hidden_dim: 64,
            layers: 4,
            rank: 16,
            kernel_size: 3,
            dropout_p: crate::nn::DEFAULT_DROPOUT,
            variant: NallVariant::SharedFactorsNodeCore,
            alpha: 1.0,
            alpha_learnable: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_dim == 0
            || self.out_dim == 0
            || self.in_len == 0
            || self.horizon == 0
            || self.num_nodes == 0
            || self.hidden_dim == 0
        {
            return Err(Error::Config(
                "predictor extents must all be positive".to_string(),
            ));
        }
        if self.layers == 0 {
            return Err(Error::Config("predictor needs at least one layer".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "stem kernel width must be odd, got {}",
                self.kernel_size
            )));
        }
        // Rank and node constraints surface through the layer config so the
        // message names the binding bound.
        nall_param_count(&self.layer_cfg())?;
        Ok(())
    }

    fn layer_cfg(&self) -> NallConfig {
        let mut c = NallConfig::new(self.hidden_dim, self.hidden_dim, self.rank, self.num_nodes);
        c.variant = self.variant;
        c.alpha = self.alpha;
        c.alpha_learnable = self.alpha_learnable;
        // Dropout lives in the residual path's activation, not inside the
        // layer, so it is applied exactly once per block.
        c.dropout_p = 0.0;
        c
    }
}

#[derive(Debug, Clone)]
pub struct NspParams {
    cfg: NspConfig,
    stem: TemporalConvParams,
    layers: Vec<NallParams>,
    norms: Vec<RmsNormParams>,
    head: LinearParams,
}

/// Builds a predictor whose residual stack starts as an exact identity.
/// `name` prefixes every parameter, keeping records distinct when several
/// predictors live in one model.
pub fn nsp_init<R: Rng>(name: &str, cfg: NspConfig, rng: &mut R) -> Result<NspParams> {
    cfg.validate()?;
    let stem = TemporalConvParams::kaiming(
        &format!("{name}.stem"),
        cfg.hidden_dim,
        cfg.in_dim,
        cfg.kernel_size,
        rng,
    )?;
    let mut layers = Vec::with_capacity(cfg.layers);
    let mut norms = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let base = LinearParams::zeros("base", cfg.hidden_dim, cfg.hidden_dim);
        let mut layer = nall_init(cfg.layer_cfg(), base, rng)?;
        layer.rename_with_prefix(&format!("{name}.layer{l}"));
        layers.push(layer);
        norms.push(RmsNormParams::unit(
            &format!("{name}.norm{l}"),
            cfg.hidden_dim,
        ));
    }
    let head = LinearParams::kaiming(
        &format!("{name}.head"),
        cfg.horizon * cfg.out_dim,
        cfg.in_len * cfg.hidden_dim,
        rng,
    )?;
    Ok(NspParams {
        cfg,
        stem,
        layers,
        norms,
        head,
    })
}

impl NspParams {
    pub fn cfg(&self) -> &NspConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[NallParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [NallParams] {
        &mut self.layers
    }

    /// The learnable correction gains of every layer, in stack order.
    pub fn alphas(&self) -> Vec<&Param> {
        self.layers.iter().map(|l| l.alpha()).collect()
    }
}

impl Parameterized for NspParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit_params(f);
        for (layer, norm) in self.layers.iter().zip(&self.norms) {
            norm.visit_params(f);
            layer.visit_params(f);
        }
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_params_mut(f);
        for (layer, norm) in self.layers.iter_mut().zip(self.norms.iter_mut()) {
            norm.visit_params_mut(f);
            layer.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }
}

/// Stem output `H^0`: `[in_len x nodes x hidden_dim]`.
pub fn nsp_stem(tape: &mut Tape, p: &NspParams, x: &Tensor) -> Result<Tensor> {
    match x.shape() {
        [t, n, d] if *t == p.cfg.in_len && *n == p.cfg.num_nodes && *d == p.cfg.in_dim => {}
        s => {
            return Err(Error::dim(format!(
                "predictor input must be {}x{}x{}, got {:?}",
                p.cfg.in_len, p.cfg.num_nodes, p.cfg.in_dim, s
            )))
        }
    }
    temporal_conv_forward(tape, &p.stem, x)
}

/// Runs the residual stack on a stem output, returning `H^L`.
pub fn nsp_trunk<R: Rng>(
    tape: &mut Tape,
    p: &NspParams,
    h0: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let mut h = h0.clone();
    for (layer, norm) in p.layers.iter().zip(&p.norms) {
        let u = rmsnorm_forward(tape, norm, &h)?;
        let u = tape.leaky_relu(&u, LEAKY_SLOPE)?;
        let u = dropout_forward(tape, &u, p.cfg.dropout_p, training, rng)?;
        let delta = crate::nall::nall_forward(tape, layer, &u, training, rng)?;
        h = tape.add(&h, &delta)?;
    }
    Ok(h)
}

/// Flattens each node's hidden trajectory and applies the shared read-out:
/// `[in_len x nodes x hidden] -> [horizon x nodes x out_dim]`.
pub fn nsp_head(tape: &mut Tape, p: &NspParams, h: &Tensor) -> Result<Tensor> {
    let cfg = &p.cfg;
    let per_node = tape.swap01(h)?; // [nodes x in_len x hidden]
    let flat = tape.reshape(&per_node, vec![cfg.num_nodes, cfg.in_len * cfg.hidden_dim])?;
    let out = linear_forward(tape, &p.head, &flat)?;
    let out = tape.reshape(&out, vec![cfg.num_nodes, cfg.horizon, cfg.out_dim])?;
    tape.swap01(&out)
}

/// Full predictor pass: stem, residual stack, read-out.
pub fn nsp_forward<R: Rng>(
    tape: &mut Tape,
    p: &NspParams,
    x: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let h0 = nsp_stem(tape, p, x)?;
    let h = nsp_trunk(tape, p, &h0, training, rng)?;
    nsp_head(tape, p, &h)
}

/// Trainable parameters of one predictor: stem, per-layer adaptation and
/// norm gain, and head. The frozen zero base maps inside the layers are
/// excluded.
pub fn nsp_trainable_param_count(cfg: &NspConfig) -> Result<u64> {
    cfg.validate()?;
    let stem = (cfg.hidden_dim * cfg.in_dim * cfg.kernel_size + cfg.hidden_dim) as u64;
    let per_layer = nall_param_count(&cfg.layer_cfg())?.adaptation + cfg.hidden_dim as u64;
    let head =
        (cfg.horizon * cfg.out_dim * (cfg.in_len * cfg.hidden_dim) + cfg.horizon * cfg.out_dim) as u64;
    Ok(stem + cfg.layers as u64 * per_layer + head)
}
