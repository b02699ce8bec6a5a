//! Node-adaptive low-rank layers.
//!
//! A NALL wraps a frozen shared affine map `W x + b` with a per-node low-rank
//! correction: node `i` sees `y_i = leaky_relu(W x_i + D_i x_i + b)` where the
//! delta `D_i` is never materialized — it is applied factor by factor. Two
//! factorizations are supported:
//!
//! * [`NallVariant::PerNodeFactors`]: `D_i = U A_i * (alpha / r)` with a
//!   shared up-projection `U [d_out x r]` and one full down-projection
//!   `A_i [r x d_in]` per node. Adaptation cost grows with `N * r * d_in`.
//! * [`NallVariant::SharedFactorsNodeCore`]: `D_i = U E_i A * (alpha / r)`
//!   where both projections are shared and only the tiny `r x r` core `E_i`
//!   is per-node, costing `r (d_in + d_out) + N r^2`. This is the default;
//!   it keeps the per-node budget quadratic in the rank rather than linear
//!   in the feature width.
//!
//! The up-projection starts at zero, so a freshly initialized layer computes
//! exactly the activated base map and adaptation begins as a no-op. `alpha`
//! is a single learnable gain on the whole correction, regularized by the
//! training loss.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{dropout_forward, kaiming_init, linear_forward, LinearParams};
use crate::tensor::{matmul_raw, Param, Parameterized, Tape, Tensor, LEAKY_SLOPE};

/// How the per-node delta is factorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NallVariant {
    /// One full `r x d_in` down-projection per node.
    PerNodeFactors,
    /// Shared down/up projections with a per-node `r x r` core.
    SharedFactorsNodeCore,
}

impl NallVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            NallVariant::PerNodeFactors => "per-node",
            NallVariant::SharedFactorsNodeCore => "shared-core",
        }
    }
}

impl std::str::FromStr for NallVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<NallVariant> {
        match s {
            "per-node" | "per-node-factors" => Ok(NallVariant::PerNodeFactors),
            "shared-core" | "shared-factors-node-core" => Ok(NallVariant::SharedFactorsNodeCore),
            other => Err(Error::Argument(format!(
                "unknown variant `{other}` (expected `per-node` or `shared-core`)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NallConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub num_nodes: usize,
    pub variant: NallVariant,
    /// Initial value of the correction gain.
    pub alpha: f64,
    /// Whether the gain is trained (and counted) or held fixed.
    pub alpha_learnable: bool,
    /// Dropout applied to the low-rank branch input during training.
    pub dropout_p: f64,
    /// Initialize the up-projection with Kaiming noise instead of zeros,
    /// giving up the exact no-op start.
    pub kaiming_up: bool,
}

impl NallConfig {
    pub fn new(d_in: usize, d_out: usize, rank: usize, num_nodes: usize) -> NallConfig {
        NallConfig {
            d_in,
            d_out,
            rank,
            num_nodes,
            variant: NallVariant::SharedFactorsNodeCore,
            alpha: 1.0,
            alpha_learnable: true,
            dropout_p: 0.0,
            kaiming_up: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.num_nodes == 0 {
            return Err(Error::Config(
                "layer extents and node count must be positive".to_string(),
            ));
        }
        if self.rank == 0 || self.rank > self.d_in.min(self.d_out) {
            return Err(Error::Config(format!(
                "rank must lie in 1..={}, got {}",
                self.d_in.min(self.d_out),
                self.rank
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Per-node factor storage for the two variants.
#[derive(Debug, Clone)]
enum NodeFactors {
    PerNode {
        /// `[num_nodes x rank x d_in]`
        down: Param,
    },
    SharedCore {
        /// `[rank x d_in]`
        down: Param,
        /// `[num_nodes x rank x rank]`
        core: Param,
    },
}

/// One node-adaptive low-rank layer.
#[derive(Debug, Clone)]
pub struct NallParams {
    cfg: NallConfig,
    /// Shared affine map; frozen, never trained through this layer.
    base: LinearParams,
    /// Shared up-projection `[d_out x rank]`, zero at init.
    up: Param,
    factors: NodeFactors,
    /// One-element correction gain.
    alpha: Param,
}

/// Parameter counts for one layer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NallParamCount {
    /// What a dense per-node adaptation would cost: `N * d_in * d_out`.
    pub full_per_node: u64,
    /// Trainable parameters of the factored adaptation, including the gain
    /// when it is learnable.
    pub adaptation: u64,
    /// Parameters of the frozen shared base map.
    pub base: u64,
}

/// Builds a layer around an existing base map. The base is frozen here; its
/// weights are the pretrained state being protected from further updates.
pub fn nall_init<R: Rng>(cfg: NallConfig, mut base: LinearParams, rng: &mut R) -> Result<NallParams> {
    cfg.validate()?;
    if base.d_in() != cfg.d_in || base.d_out() != cfg.d_out {
        return Err(Error::Config(format!(
            "base map is {}x{}, layer expects {}x{}",
            base.d_out(),
            base.d_in(),
            cfg.d_out,
            cfg.d_in
        )));
    }
    base.set_frozen(true);
    let up_value = if cfg.kaiming_up {
        kaiming_init(vec![cfg.d_out, cfg.rank], cfg.rank, rng)?
    } else {
        Tensor::zeros(vec![cfg.d_out, cfg.rank])
    };
    let up = Param::new("up", up_value);
    let factors = match cfg.variant {
        NallVariant::PerNodeFactors => NodeFactors::PerNode {
            down: Param::new(
                "down",
                kaiming_init(vec![cfg.num_nodes, cfg.rank, cfg.d_in], cfg.d_in, rng)?,
            ),
        },
        NallVariant::SharedFactorsNodeCore => NodeFactors::SharedCore {
            down: Param::new("down", kaiming_init(vec![cfg.rank, cfg.d_in], cfg.d_in, rng)?),
            core: Param::new(
                "core",
                kaiming_init(vec![cfg.num_nodes, cfg.rank, cfg.rank], cfg.rank, rng)?,
            ),
        },
    };
    let mut alpha = Param::new("alpha", Tensor::scalar(cfg.alpha));
    alpha.set_frozen(!cfg.alpha_learnable);
    Ok(NallParams {
        cfg,
        base,
        up,
        factors,
        alpha,
    })
}

impl NallParams {
    pub fn cfg(&self) -> &NallConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> &Param {
        &self.alpha
    }

    pub fn base(&self) -> &LinearParams {
        &self.base
    }

    /// Replaces the zero up-projection with Kaiming noise so the correction
    /// path carries signal. Used by gradient diagnostics, where a dormant
    /// branch would make checks pass vacuously.
    pub fn randomize_up<R: Rng>(&mut self, rng: &mut R) -> Result<()> {
        let value = kaiming_init(vec![self.cfg.d_out, self.cfg.rank], self.cfg.rank, rng)?;
        self.up.set_value(value)
    }

    /// Renames every parameter with a dotted prefix; used when layers are
    /// assembled into larger models so checkpoint records stay unambiguous.
    pub fn rename_with_prefix(&mut self, prefix: &str) {
        fn rename(p: &mut Param, prefix: &str, leaf: &str) {
            let value = p.value().clone();
            let frozen = p.is_frozen();
            let mut fresh = Param::new(format!("{prefix}.{leaf}"), value);
            fresh.set_frozen(frozen);
            *p = fresh;
        }
        rename(&mut self.base.weight, prefix, "base.weight");
        rename(&mut self.base.bias, prefix, "base.bias");
        rename(&mut self.up, prefix, "up");
        rename(&mut self.alpha, prefix, "alpha");
        match &mut self.factors {
            NodeFactors::PerNode { down } => rename(down, prefix, "down"),
            NodeFactors::SharedCore { down, core } => {
                rename(down, prefix, "down");
                rename(core, prefix, "core");
            }
        }
    }
}

impl Parameterized for NallParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.base.visit_params(f);
        f(&self.up);
        match &self.factors {
            NodeFactors::PerNode { down } => f(down),
            NodeFactors::SharedCore { down, core } => {
                f(down);
                f(core);
            }
        }
        f(&self.alpha);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.base.visit_params_mut(f);
        f(&mut self.up);
        match &mut self.factors {
            NodeFactors::PerNode { down } => f(down),
            NodeFactors::SharedCore { down, core } => {
                f(down);
                f(core);
            }
        }
        f(&mut self.alpha);
    }
}

/// Applies the layer to `x[t x num_nodes x d_in]`.
///
/// The base path sees `x` unchanged; the low-rank branch sees a dropped-out
/// copy during training. The correction is computed factor by factor —
/// down-projection, optional per-node core, up-projection — then scaled by
/// `alpha / rank` and added to the base output before the activation.
pub fn nall_forward<R: Rng>(
    tape: &mut Tape,
    p: &NallParams,
    x: &Tensor,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    let (t, n, din) = match x.shape() {
        [t, n, d] => (*t, *n, *d),
        _ => {
            return Err(Error::dim(format!(
                "layer input must be 3-d [t x nodes x features], got {:?}",
                x.shape()
            )))
        }
    };
    if n != p.cfg.num_nodes || din != p.cfg.d_in {
        return Err(Error::dim(format!(
            "input is {t}x{n}x{din}, layer expects nodes={} features={}",
            p.cfg.num_nodes, p.cfg.d_in
        )));
    }

    let base_out = linear_forward(tape, &p.base, x)?;

    let branch = dropout_forward(tape, x, p.cfg.dropout_p, training, rng)?;
    let reduced = match &p.factors {
        NodeFactors::PerNode { down } => {
            let d = tape.param(down);
            tape.per_node_linear(&branch, &d)?
        }
        NodeFactors::SharedCore { down, core } => {
            let d = tape.param(down);
            let flat = tape.reshape(&branch, vec![t * n, din])?;
            let u = tape.matmul_nt(&flat, &d)?;
            let u = tape.reshape(&u, vec![t, n, p.cfg.rank])?;
            let c = tape.param(core);
            tape.per_node_linear(&u, &c)?
        }
    };
    let up = tape.param(&p.up);
    let flat = tape.reshape(&reduced, vec![t * n, p.cfg.rank])?;
    let lifted = tape.matmul_nt(&flat, &up)?;
    let lifted = tape.reshape(&lifted, vec![t, n, p.cfg.d_out])?;

    let alpha = tape.param(&p.alpha);
    let gained = tape.mul(&lifted, &alpha)?;
    let delta = tape.scale(&gained, 1.0 / p.cfg.rank as f64)?;

    let summed = tape.add(&base_out, &delta)?;
    tape.leaky_relu(&summed, LEAKY_SLOPE)
}

/// Densifies the correction matrix of one node: `U A_i * (alpha / r)` or
/// `U E_i A * (alpha / r)`, shape `[d_out x d_in]`. Exists for inspection and
/// as a cross-check oracle; the forward pass never builds this product.
pub fn nall_materialize_delta(p: &NallParams, node: usize) -> Result<Tensor> {
    let cfg = &p.cfg;
    if node >= cfg.num_nodes {
        return Err(Error::Argument(format!(
            "node {node} out of range for {} nodes",
            cfg.num_nodes
        )));
    }
    let r = cfg.rank;
    let down_i: Vec<f64> = match &p.factors {
        NodeFactors::PerNode { down } => {
            let v = down.value().values();
            v[node * r * cfg.d_in..(node + 1) * r * cfg.d_in].to_vec()
        }
        NodeFactors::SharedCore { down, core } => {
            let e = core.value().values();
            let e_i = &e[node * r * r..(node + 1) * r * r];
            matmul_raw(e_i, down.value().values(), r, r, cfg.d_in)
        }
    };
    let dense = matmul_raw(p.up.value().values(), &down_i, cfg.d_out, r, cfg.d_in);
    let gain = p.alpha.value().scalar_value()? / r as f64;
    Tensor::new(
        vec![cfg.d_out, cfg.d_in],
        dense.into_iter().map(|v| v * gain).collect(),
    )
}

/// Closed-form parameter accounting for a configuration.
pub fn nall_param_count(cfg: &NallConfig) -> Result<NallParamCount> {
    cfg.validate()?;
    let (n, din, dout, r) = (
        cfg.num_nodes as u64,
        cfg.d_in as u64,
        cfg.d_out as u64,
        cfg.rank as u64,
    );
    let factors = match cfg.variant {
        NallVariant::PerNodeFactors => dout * r + n * r * din,
        NallVariant::SharedFactorsNodeCore => dout * r + r * din + n * r * r,
    };
    Ok(NallParamCount {
        full_per_node: n * din * dout,
        adaptation: factors + if cfg.alpha_learnable { 1 } else { 0 },
        base: dout * din + dout,
    })
}
