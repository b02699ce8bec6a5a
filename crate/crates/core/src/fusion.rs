//! The fused model: a frozen backbone corrected by node-specific predictor
//! blocks and blended back through a learned gate.
//!
//! For input window `X`:
//!
//! * `Y_base = backbone(X)` — the pretrained forecast, frozen here.
//! * `Z^1 = NSP^1(relu(Y_base))`; deeper blocks re-read the raw window:
//!   `Z^k = NSP^k(relu(concat(X, Z^{k-1})))`.
//! * `Z_mean` averages all block outputs.
//! * A gate `R = sigmoid(F(concat(X, Z_mean)))`, clamped strictly inside
//!   `(0, 1)`, mixes the two forecasts: `Y = R * Y_base + (1 - R) * Z_mean`.
//!
//! The blend is convex elementwise, so the correction can never push a
//! prediction outside the span of the two forecasts it mixes. The training
//! loss adds an L2 penalty on the collected per-layer correction gains,
//! discouraging the adaptation from drifting further than the data demands.
//!
//! Because this construction needs `concat(X, Z)` along features, the input
//! window length and forecast horizon must match.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneNet;
use crate::error::{Error, Result};
use crate::model::{mean_absolute_loss, ForecastModel};
use crate::nall::NallVariant;
use crate::nn::{linear_forward, LinearParams};
use crate::nsp::{nsp_forward, nsp_init, nsp_trainable_param_count, NspConfig, NspParams};
use crate::tensor::{Param, Parameterized, Tape, Tensor};

/// The gate is kept at least this far from 0 and 1, so both forecasts always
/// retain a gradient path even when the sigmoid saturates in f64.
pub const GATE_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct StLoraConfig {
    /// Number of predictor blocks `K`.
    pub blocks: usize,
    /// Hidden width of each block.
    pub hidden_dim: usize,
    /// Residual layers per block.
    pub layers: usize,
    pub rank: usize,
    pub kernel_size: usize,
    pub dropout_p: f64,
    pub variant: NallVariant,
    pub alpha: f64,
    pub alpha_learnable: bool,
    /// Weight of the gain-norm penalty in the training loss.
    pub lambda: f64,
}

impl Default for StLoraConfig {
    fn default() -> StLoraConfig {
        StLoraConfig {
            blocks: 1,
            hidden_dim: 64,
            layers: 4,
            rank: 16,
            kernel_size: 3,
            dropout_p: crate::nn::DEFAULT_DROPOUT,
            variant: NallVariant::SharedFactorsNodeCore,
            alpha: 1.0,
            alpha_learnable: true,
            lambda: 1e-4,
        }
    }
}

impl StLoraConfig {
    fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("the fused model needs at least one block".to_string()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "gain penalty weight must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Configuration of block `k`. The first block reads the activated base
    /// forecast (`feat_dim` features); every later block reads the raw window
    /// concatenated with its predecessor (`2 * feat_dim`).
    fn block_cfg(&self, k: usize, feat_dim: usize, len: usize, num_nodes: usize) -> NspConfig {
        let in_dim = if k == 0 { feat_dim } else { 2 * feat_dim };
        let mut c = NspConfig::new(in_dim, feat_dim, len, len, num_nodes);
        c.hidden_dim = self.hidden_dim;
        c.layers = self.layers;
        c.rank = self.rank;
        c.kernel_size = self.kernel_size;
        c.dropout_p = self.dropout_p;
        c.variant = self.variant;
        c.alpha = self.alpha;
        c.alpha_learnable = self.alpha_learnable;
        c
    }
}

/// Everything one fused forward pass produces.
pub struct FusionOutput {
    pub y_final: Tensor,
    pub y_base: Tensor,
    /// Gate values in `(0, 1)`, same shape as the forecasts.
    pub gate: Tensor,
    pub z_mean: Tensor,
}

#[derive(Debug, Clone)]
pub struct StLoraModel {
    cfg: StLoraConfig,
    backbone: BackboneNet,
    blocks: Vec<NspParams>,
    gate: LinearParams,
}

impl StLoraModel {
    /// Wraps a pretrained backbone, freezing it. Only the blocks and the
    /// gate train from here on.
    pub fn build<R: Rng>(
        mut backbone: BackboneNet,
        cfg: StLoraConfig,
        rng: &mut R,
    ) -> Result<StLoraModel> {
        cfg.validate()?;
        let b = backbone.cfg().clone();
        if b.in_len != b.horizon {
            return Err(Error::Config(format!(
                "the fused model needs matching window and horizon lengths, got {} and {}",
                b.in_len, b.horizon
            )));
        }
        backbone.set_frozen(true);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for k in 0..cfg.blocks {
            let bc = cfg.block_cfg(k, b.feat_dim, b.in_len, b.num_nodes);
            blocks.push(nsp_init(&format!("block{k}"), bc, rng)?);
        }
        let gate = LinearParams::kaiming("fusion.gate", b.feat_dim, 2 * b.feat_dim, rng)?;
        Ok(StLoraModel {
            cfg,
            backbone,
            blocks,
            gate,
        })
    }

    pub fn cfg(&self) -> &StLoraConfig {
        &self.cfg
    }

    pub fn backbone(&self) -> &BackboneNet {
        &self.backbone
    }

    pub fn blocks(&self) -> &[NspParams] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [NspParams] {
        &mut self.blocks
    }

    pub fn gate_mut(&mut self) -> &mut LinearParams {
        &mut self.gate
    }

    /// Every block's correction gains, outer block order then stack order.
    pub fn alphas(&self) -> Vec<&Param> {
        self.blocks.iter().flat_map(|b| b.alphas()).collect()
    }

    /// Full fused pass with intermediate products exposed.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<FusionOutput> {
        let y_base = self.backbone.predict(tape, x, training, rng)?;

        let first_in = tape.relu(&y_base)?;
        let mut z = nsp_forward(tape, &self.blocks[0], &first_in, training, rng)?;
        let mut zs = vec![z.clone()];
        for block in &self.blocks[1..] {
            let joined = tape.concat_features(x, &z)?;
            let activated = tape.relu(&joined)?;
            z = nsp_forward(tape, block, &activated, training, rng)?;
            zs.push(z.clone());
        }
        let z_mean = tape.reduce_mean(&zs)?;

        let gate_in = tape.concat_features(x, &z_mean)?;
        let logits = linear_forward(tape, &self.gate, &gate_in)?;
        let gate = tape.sigmoid(&logits)?;
        let gate = tape.clamp(&gate, GATE_MARGIN, 1.0 - GATE_MARGIN)?;

        let one = Tensor::full(gate.shape().to_vec(), 1.0);
        let inverse = tape.sub(&one, &gate)?;
        let kept = tape.mul(&gate, &y_base)?;
        let corrected = tape.mul(&inverse, &z_mean)?;
        let y_final = tape.add(&kept, &corrected)?;

        Ok(FusionOutput {
            y_final,
            y_base,
            gate,
            z_mean,
        })
    }

    /// Trainable parameters: all blocks plus the gate map. The frozen
    /// backbone is excluded by construction.
    pub fn adaptation_param_count(&self) -> u64 {
        self.trainable_param_count()
    }
}

impl Parameterized for StLoraModel {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.gate.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
        self.gate.visit_params_mut(f);
    }
}

impl ForecastModel for StLoraModel {
    fn predict(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        Ok(self.forward(tape, input, training, rng)?.y_final)
    }

    /// Forecast error plus `lambda` times the Euclidean norm of all
    /// correction gains.
    fn loss(&self, tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
        let mae = mean_absolute_loss(tape, prediction, target)?;
        if self.cfg.lambda == 0.0 {
            return Ok(mae);
        }
        let alphas = self.alphas();
        let mut stacked = tape.param(alphas[0]);
        for a in &alphas[1..] {
            let t = tape.param(a);
            stacked = tape.concat_features(&stacked, &t)?;
        }
        let norm = tape.l2_norm(&stacked)?;
        let penalty = tape.scale(&norm, self.cfg.lambda)?;
        tape.add(&mae, &penalty)
    }

    fn in_len(&self) -> usize {
        self.backbone.cfg().in_len
    }

    fn horizon(&self) -> usize {
        self.backbone.cfg().horizon
    }

    fn feat_dim(&self) -> usize {
        self.backbone.cfg().feat_dim
    }
}

/// Closed-form adaptation size for a fused model: every block's trainable
/// parameters plus the gate map.
pub fn stlora_adaptation_count(
    cfg: &StLoraConfig,
    feat_dim: usize,
    len: usize,
    num_nodes: usize,
) -> Result<u64> {
    cfg.validate()?;
    let mut total = 0u64;
    for k in 0..cfg.blocks {
        total += nsp_trainable_param_count(&cfg.block_cfg(k, feat_dim, len, num_nodes))?;
    }
    let gate = (feat_dim * 2 * feat_dim + feat_dim) as u64;
    Ok(total + gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneKind};
    use crate::tensor::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_model(blocks: usize, seed: u64) -> StLoraModel {
        let mut r = rng(seed);
        let mut bc = BackboneConfig::new(BackboneKind::SharedMlp, 2, 3, 3, 3);
        bc.hidden_dim = 4;
        let backbone = BackboneNet::build(bc, None, &mut r).unwrap();
        let cfg = StLoraConfig {
            blocks,
            hidden_dim: 4,
            layers: 2,
            rank: 2,
            kernel_size: 3,
            dropout_p: 0.0,
            lambda: 0.0,
            ..StLoraConfig::default()
        };
        StLoraModel::build(backbone, cfg, &mut r).unwrap()
    }

    fn random_window(model: &StLoraModel, seed: u64) -> Tensor {
        use rand::Rng as _;
        let mut r = rng(seed);
        let n = model.in_len() * model.backbone().cfg().num_nodes * model.feat_dim();
        Tensor::new(
            vec![model.in_len(), model.backbone().cfg().num_nodes, model.feat_dim()],
            (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn window_and_horizon_must_match() {
        let mut r = rng(1);
        let bc = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 3, 2);
        let backbone = BackboneNet::build(bc, None, &mut r).unwrap();
        let err = StLoraModel::build(backbone, StLoraConfig::default(), &mut r).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn backbone_is_frozen_and_adaptation_counted() {
        for blocks in [1, 2] {
            let m = small_model(blocks, 7);
            assert_eq!(m.backbone().trainable_param_count(), 0);
            let closed = stlora_adaptation_count(m.cfg(), 2, 3, 3).unwrap();
            assert_eq!(m.adaptation_param_count(), closed, "blocks={blocks}");
        }
    }

    #[test]
    fn pinned_adaptation_size() {
        // One block, four rank-8 layers at hidden 8 over 20 nodes of one
        // feature, 12-step windows: 6,864 block parameters plus a 3-parameter
        // gate.
        let cfg = StLoraConfig {
            blocks: 1,
            hidden_dim: 8,
            layers: 4,
            rank: 8,
            ..StLoraConfig::default()
        };
        assert_eq!(stlora_adaptation_count(&cfg, 1, 12, 20).unwrap(), 6_867);
    }

    #[test]
    fn gate_stays_strictly_inside_unit_interval() {
        let m = small_model(2, 11);
        let x = random_window(&m, 12);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, false, &mut rng(0)).unwrap();
        for g in out.gate.values() {
            assert!(*g > 0.0 && *g < 1.0, "gate value {g} left (0, 1)");
        }
    }

    #[test]
    fn blend_is_elementwise_convex() {
        let m = small_model(2, 13);
        let x = random_window(&m, 14);
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &x, false, &mut rng(0)).unwrap();
        for i in 0..out.y_final.numel() {
            let (y, b, z) = (
                out.y_final.values()[i],
                out.y_base.values()[i],
                out.z_mean.values()[i],
            );
            let lo = b.min(z) - 1e-9;
            let hi = b.max(z) + 1e-9;
            assert!(y >= lo && y <= hi, "element {i}: {y} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn saturated_gate_returns_each_side() {
        for (bias, toward_base) in [(30.0, true), (-30.0, false)] {
            let mut m = small_model(1, 17);
            let d = m.feat_dim();
            m.gate_mut()
                .bias
                .set_value(Tensor::full(vec![d], bias))
                .unwrap();
            m.gate_mut()
                .weight
                .set_value(Tensor::zeros(vec![d, 2 * d]))
                .unwrap();
            let x = random_window(&m, 18);
            let mut tape = Tape::new();
            let out = m.forward(&mut tape, &x, false, &mut rng(0)).unwrap();
            let target = if toward_base { &out.y_base } else { &out.z_mean };
            for (y, t) in out.y_final.values().iter().zip(target.values()) {
                assert!((y - t).abs() < 1e-9, "{y} vs {t} at bias {bias}");
            }
            for g in out.gate.values() {
                assert!(*g > 0.0 && *g < 1.0);
            }
        }
    }

    #[test]
    fn loss_adds_the_gain_norm() {
        let mut m = small_model(2, 19);
        m.cfg.lambda = 0.5;
        let x = random_window(&m, 20);
        let target = random_window(&m, 21);

        let mut tape = Tape::new();
        let y = m.predict(&mut tape, &x, false, &mut rng(0)).unwrap();
        let full = m.loss(&mut tape, &y, &target).unwrap().scalar_value().unwrap();

        let mut tape2 = Tape::new();
        let y2 = m.predict(&mut tape2, &x, false, &mut rng(0)).unwrap();
        let mae = mean_absolute_loss(&mut tape2, &y2, &target)
            .unwrap()
            .scalar_value()
            .unwrap();

        // Two blocks of two layers: four gains, all at their initial 1.0.
        let expected = 0.5 * (4f64).sqrt();
        assert!((full - mae - expected).abs() < 1e-12, "{full} vs {mae} + {expected}");
    }

    #[test]
    fn backward_reaches_only_adaptation_parameters() {
        let m = small_model(2, 23);
        let x = random_window(&m, 24);
        let target = random_window(&m, 25);
        let mut tape = Tape::new();
        let y = m.predict(&mut tape, &x, false, &mut rng(0)).unwrap();
        let loss = m.loss(&mut tape, &y, &target).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let mut trainable_with_grad = 0usize;
        m.visit_params(&mut |p| {
            if p.is_frozen() {
                assert!(grads.get(p).is_none(), "frozen {} received a gradient", p.name());
            } else if grads.get(p).is_some() {
                trainable_with_grad += 1;
            }
        });
        // Not every trainable parameter must fire (zero up-projections gate
        // some paths), but the bulk of the adaptation must.
        assert!(trainable_with_grad > 10, "only {trainable_with_grad} gradients");
    }

    #[test]
    fn training_pass_is_reproducible_under_one_seed() {
        let mut r = rng(27);
        let mut bc = BackboneConfig::new(BackboneKind::SharedMlp, 2, 3, 3, 3);
        bc.hidden_dim = 4;
        let backbone = BackboneNet::build(bc, None, &mut r).unwrap();
        let cfg = StLoraConfig {
            blocks: 1,
            hidden_dim: 4,
            layers: 2,
            rank: 2,
            dropout_p: 0.4,
            lambda: 0.0,
            ..StLoraConfig::default()
        };
        let m = StLoraModel::build(backbone, cfg, &mut r).unwrap();
        let x = random_window(&m, 28);
        let mut tape = Tape::new();
        let a = m.predict(&mut tape, &x, true, &mut rng(5)).unwrap();
        let mut tape2 = Tape::new();
        let b = m.predict(&mut tape2, &x, true, &mut rng(5)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = small_model(2, 29);
        m.cfg.lambda = 0.3;
        let mut r = rng(30);
        for b in m.blocks_mut() {
            for layer in b.layers_mut() {
                layer.randomize_up(&mut r).unwrap();
            }
        }
        let x = random_window(&m, 31);
        let target = random_window(&m, 32);

        let mut point = Vec::new();
        m.visit_params(&mut |q| {
            if !q.is_frozen() {
                point.push(q.value().clone());
            }
        });

        let run = |m: &StLoraModel| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let y = m.predict(&mut tape, &x, false, &mut rng(0)).unwrap();
            let loss = m.loss(&mut tape, &y, &target).unwrap();
            let v = loss.scalar_value().unwrap();
            let grads = tape.backward(&loss).unwrap();
            let mut gs = Vec::new();
            m.visit_params(&mut |q| {
                if !q.is_frozen() {
                    gs.push(
                        grads
                            .get(q)
                            .cloned()
                            .unwrap_or_else(|| Tensor::zeros(q.value().shape().to_vec())),
                    );
                }
            });
            (v, gs)
        };
        let (_, analytic) = run(&m);

        let mut f = |ps: &[Tensor]| {
            let mut trial = m.clone();
            let mut idx = 0;
            let mut res = Ok(());
            trial.visit_params_mut(&mut |q| {
                if !q.is_frozen() {
                    if let Err(e) = q.set_value(ps[idx].clone()) {
                        res = Err(e);
                    }
                    idx += 1;
                }
            });
            res?;
            Ok(run(&trial).0)
        };
        // The loss has |.| kinks; the check point is generic so the bound
        // stays comfortably tight in practice.
        let err = finite_difference_check(&mut f, &point, &analytic, 1e-5).unwrap();
        assert!(err < 1e-5, "gradient error {err}");
    }
}
