//! Pretrainable forecasting backbones.
//!
//! Two deliberately compact architectures share one contract: map an input
//! window `[in_len x nodes x feat]` to a forecast `[horizon x nodes x feat]`
//! with every parameter shared across nodes, so whatever per-node structure
//! the data has is exactly what these models cannot express. They exist to
//! be pretrained, frozen, and corrected by the node-adaptive stack.
//!
//! * [`BackboneKind::SharedMlp`]: each node's flattened window goes through
//!   one two-layer perceptron.
//! * [`BackboneKind::GraphConv`]: one neighborhood-averaging pass over the
//!   row-normalized adjacency, a pointwise feature map, then the same
//!   perceptron head.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{mean_absolute_loss, ForecastModel};
use crate::nn::{linear_forward, LinearParams};
use crate::tensor::{Param, Parameterized, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    SharedMlp,
    GraphConv,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::SharedMlp => "shared-mlp",
            BackboneKind::GraphConv => "graph-conv",
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<BackboneKind> {
        match s {
            "shared-mlp" => Ok(BackboneKind::SharedMlp),
            "graph-conv" => Ok(BackboneKind::GraphConv),
            other => Err(Error::Argument(format!(
                "unknown backbone `{other}` (expected `shared-mlp` or `graph-conv`)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub feat_dim: usize,
    pub in_len: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub hidden_dim: usize,
}

impl BackboneConfig {
    pub fn new(kind: BackboneKind, feat_dim: usize, in_len: usize, horizon: usize, num_nodes: usize) -> BackboneConfig {
        BackboneConfig {
            kind,
            feat_dim,
            in_len,
            horizon,
            num_nodes,
            hidden_dim: 256,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feat_dim == 0
            || self.in_len == 0
            || self.horizon == 0
            || self.num_nodes == 0
            || self.hidden_dim == 0
        {
            return Err(Error::Config(
                "backbone extents must all be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Row-normalized adjacency with self-loops: `D^{-1} (A + I)` where `A` sums
/// the given directed `(src, dst, weight)` edges. Every row of the result
/// sums to one, so one application is a weighted neighborhood average.
pub fn normalize_adjacency(num_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Tensor> {
    if num_nodes == 0 {
        return Err(Error::Argument("adjacency needs at least one node".to_string()));
    }
    let n = num_nodes;
    let mut a = vec![0.0f64; n * n];
    for &(src, dst, w) in edges {
        if src >= n || dst >= n {
            return Err(Error::Data(format!(
                "edge ({src}, {dst}) out of range for {n} nodes"
            )));
        }
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Data(format!(
                "edge ({src}, {dst}) has invalid weight {w}"
            )));
        }
        a[src * n + dst] += w;
    }
    for i in 0..n {
        a[i * n + i] += 1.0;
    }
    for i in 0..n {
        let row_sum: f64 = a[i * n..(i + 1) * n].iter().sum();
        for v in &mut a[i * n..(i + 1) * n] {
            *v /= row_sum;
        }
    }
    Tensor::new(vec![n, n], a)
}

#[derive(Debug, Clone)]
pub enum BackboneNet {
    SharedMlp {
        cfg: BackboneConfig,
        l1: LinearParams,
        l2: LinearParams,
    },
    GraphConv {
        cfg: BackboneConfig,
        /// Constant row-normalized adjacency; not a parameter.
        mix: Tensor,
        w1: LinearParams,
        l1: LinearParams,
        l2: LinearParams,
    },
}

impl BackboneNet {
    /// Builds the configured backbone. Graph convolution requires the
    /// dataset's adjacency edges; the perceptron ignores them.
    pub fn build<R: Rng>(
        cfg: BackboneConfig,
        edges: Option<&[(usize, usize, f64)]>,
        rng: &mut R,
    ) -> Result<BackboneNet> {
        cfg.validate()?;
        let flat_in = cfg.in_len * cfg.feat_dim;
        let flat_out = cfg.horizon * cfg.feat_dim;
        let l1 = LinearParams::kaiming("backbone.l1", cfg.hidden_dim, flat_in, rng)?;
        let l2 = LinearParams::kaiming("backbone.l2", flat_out, cfg.hidden_dim, rng)?;
        match cfg.kind {
            BackboneKind::SharedMlp => Ok(BackboneNet::SharedMlp { cfg, l1, l2 }),
            BackboneKind::GraphConv => {
                let edges = edges.ok_or_else(|| {
                    Error::Config("graph-conv backbone needs the dataset adjacency".to_string())
                })?;
                let mix = normalize_adjacency(cfg.num_nodes, edges)?;
                let w1 = LinearParams::kaiming("backbone.w1", cfg.feat_dim, cfg.feat_dim, rng)?;
                Ok(BackboneNet::GraphConv { cfg, mix, w1, l1, l2 })
            }
        }
    }

    pub fn cfg(&self) -> &BackboneConfig {
        match self {
            BackboneNet::SharedMlp { cfg, .. } => cfg,
            BackboneNet::GraphConv { cfg, .. } => cfg,
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.cfg().kind
    }

    /// Marks every backbone parameter frozen (or trainable again).
    pub fn set_frozen(&mut self, frozen: bool) {
        self.visit_params_mut(&mut |p| p.set_frozen(frozen));
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let cfg = self.cfg();
        match x.shape() {
            [t, n, d] if *t == cfg.in_len && *n == cfg.num_nodes && *d == cfg.feat_dim => Ok(()),
            s => Err(Error::dim(format!(
                "backbone input must be {}x{}x{}, got {:?}",
                cfg.in_len, cfg.num_nodes, cfg.feat_dim, s
            ))),
        }
    }

    /// Shared perceptron head over per-node flattened windows:
    /// `[nodes x in_len*feat] -> [horizon x nodes x feat]`.
    fn head(
        &self,
        tape: &mut Tape,
        l1: &LinearParams,
        l2: &LinearParams,
        flat: &Tensor,
    ) -> Result<Tensor> {
        let cfg = self.cfg();
        let h = linear_forward(tape, l1, flat)?;
        let h = tape.relu(&h)?;
        let out = linear_forward(tape, l2, &h)?;
        let out = tape.reshape(&out, vec![cfg.num_nodes, cfg.horizon, cfg.feat_dim])?;
        tape.swap01(&out)
    }
}

impl Parameterized for BackboneNet {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            BackboneNet::SharedMlp { l1, l2, .. } => {
                l1.visit_params(f);
                l2.visit_params(f);
            }
            BackboneNet::GraphConv { w1, l1, l2, .. } => {
                w1.visit_params(f);
                l1.visit_params(f);
                l2.visit_params(f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            BackboneNet::SharedMlp { l1, l2, .. } => {
                l1.visit_params_mut(f);
                l2.visit_params_mut(f);
            }
            BackboneNet::GraphConv { w1, l1, l2, .. } => {
                w1.visit_params_mut(f);
                l1.visit_params_mut(f);
                l2.visit_params_mut(f);
            }
        }
    }
}

impl ForecastModel for BackboneNet {
    fn predict(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        _training: bool,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        self.check_input(input)?;
        let cfg = self.cfg().clone();
        let per_node = tape.swap01(input)?; // [nodes x in_len x feat]
        let flat = tape.reshape(&per_node, vec![cfg.num_nodes, cfg.in_len * cfg.feat_dim])?;
        match self {
            BackboneNet::SharedMlp { l1, l2, .. } => self.head(tape, l1, l2, &flat),
            BackboneNet::GraphConv { mix, w1, l1, l2, .. } => {
                let mixed = tape.matmul(mix, &flat)?;
                let rows = tape.reshape(&mixed, vec![cfg.num_nodes * cfg.in_len, cfg.feat_dim])?;
                let mapped = linear_forward(tape, w1, &rows)?;
                let mapped = tape.relu(&mapped)?;
                let flat2 =
                    tape.reshape(&mapped, vec![cfg.num_nodes, cfg.in_len * cfg.feat_dim])?;
                self.head(tape, l1, l2, &flat2)
            }
        }
    }

    fn loss(&self, tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
        mean_absolute_loss(tape, prediction, target)
    }

    fn in_len(&self) -> usize {
        self.cfg().in_len
    }

    fn horizon(&self) -> usize {
        self.cfg().horizon
    }

    fn feat_dim(&self) -> usize {
        self.cfg().feat_dim
    }
}

/// Closed-form parameter count for a backbone configuration.
pub fn backbone_param_count(cfg: &BackboneConfig) -> Result<u64> {
    cfg.validate()?;
    let (d, s, h, hid) = (
        cfg.feat_dim as u64,
        cfg.in_len as u64,
        cfg.horizon as u64,
        cfg.hidden_dim as u64,
    );
    let mlp = hid * (s * d) + hid + (h * d) * hid + h * d;
    Ok(match cfg.kind {
        BackboneKind::SharedMlp => mlp,
        BackboneKind::GraphConv => mlp + d * d + d,
    })
}
