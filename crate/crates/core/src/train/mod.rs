//! Optimization: Adam with decoupled weight decay, a step learning-rate
//! schedule, and the training loop shared by pretraining and adaptation.
//!
//! Determinism is the organizing constraint. Batch order is shuffled by a
//! generator derived from the run seed and epoch; every window's stochastic
//! layers draw from a generator derived from (seed, epoch, step, slot).
//! Per-window gradients inside one batch may be computed in parallel, but
//! the results are collected in window order and averaged sequentially, so
//! the optimizer sees bit-identical updates regardless of thread count.
//! Optimizer steps themselves are strictly sequential.

pub mod checkpoint;
pub mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{mean_absolute_loss, ForecastModel};
use crate::tensor::{GradientMap, ParamId, Parameterized, Tape, Tensor};

/// Splitmix-style avalanche; stable basis for every derived seed.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A generator for one labeled stream of randomness, decoupled from every
/// other stream so parallel schedules cannot change what any consumer sees.
pub(crate) fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = mix64(seed);
    for &t in tags {
        h = mix64(h ^ t);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Adam state: per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(lr: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over every trainable parameter. Parameters missing from
/// `grads` are treated as having a zero gradient. The decay is decoupled —
/// applied to the parameter directly, never mixed into the moments — and
/// touches only matrix-shaped parameters, leaving biases, gains, and scalar
/// gains undecayed.
pub fn adam_step(
    state: &mut OptimizerState,
    grads: &GradientMap,
    params: &mut dyn Parameterized,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let mut failure: Option<Error> = None;
    params.visit_params_mut(&mut |p| {
        if failure.is_some() || p.is_frozen() {
            return;
        }
        let n = p.value().numel();
        let grad = grads.get_id(p.id());
        if let Some(g) = grad {
            if g.shape() != p.value().shape() {
                failure = Some(Error::State(format!(
                    "gradient for `{}` has the wrong shape",
                    p.name()
                )));
                return;
            }
        }
        let has_history = state.moments.contains_key(&p.id());
        if grad.is_none() && !has_history && state.weight_decay == 0.0 {
            return; // Exact fixed point: nothing moves this parameter.
        }
        let (m, v) = state
            .moments
            .entry(p.id())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        if m.len() != n {
            failure = Some(Error::State(format!(
                "optimizer moments for `{}` no longer match its shape",
                p.name()
            )));
            return;
        }
        let decay = if p.value().shape().len() >= 2 {
            state.lr * state.weight_decay
        } else {
            0.0
        };
        let zero = 0.0;
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let g = grad.map_or(zero, |g| g.values()[i]);
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let x = p.value().values()[i];
            next.push(x - decay * x - state.lr * m_hat / (v_hat.sqrt() + state.epsilon));
        }
        let shape = p.value().shape().to_vec();
        match Tensor::new(shape, next) {
            Ok(t) => {
                if let Err(e) = p.set_value(t) {
                    failure = Some(e);
                }
            }
            Err(e) => failure = Some(e),
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Piecewise-constant decay: the rate drops by `gamma` every `step_size`
/// epochs.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub step_size: usize,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> LrSchedule {
        LrSchedule {
            base_lr: 1e-3,
            step_size: 10,
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if self.step_size == 0 {
            return Err(Error::Config("schedule step size must be positive".to_string()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "decay ratio must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    // Fold the decay one decade at a time: repeated rounding keeps the
    // published rates (1e-3 -> 1e-4 -> 1e-5) exact, where a power-then-scale
    // evaluation drifts by an ulp after two steps.
    let drops = epoch / schedule.step_size.max(1);
    (0..drops).fold(schedule.base_lr, |lr, _| lr * schedule.gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(phase: Phase, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            phase,
            epochs,
            batch_size: 16,
            seed,
            schedule: LrSchedule::default(),
            weight_decay: 5e-4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".to_string()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.schedule.validate()
    }
}

/// One completed epoch: mean training loss, validation MAE afterwards, and
/// the rate the epoch ran at. Losses are on the normalized scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Full-pass training loss of the untouched model (evaluation mode).
    pub initial_train_loss: f64,
    /// Validation MAE of the untouched model.
    pub initial_val_mae: f64,
    pub rows: Vec<EpochRow>,
    /// Epoch whose parameters the model was left holding; 0 means the
    /// initial state was never improved upon.
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

fn check_windows<M: ForecastModel>(model: &M, ws: &WindowSet, label: &str) -> Result<()> {
    if ws.is_empty() {
        return Err(Error::Argument(format!("{label} windows are empty")));
    }
    if ws.in_len() != model.in_len()
        || ws.horizon() != model.horizon()
        || ws.feat_dim() != model.feat_dim()
    {
        return Err(Error::dim(format!(
            "{label} windows are {}-in/{}-out with {} features, model expects {}/{}/{}",
            ws.in_len(),
            ws.horizon(),
            ws.feat_dim(),
            model.in_len(),
            model.horizon(),
            model.feat_dim()
        )));
    }
    Ok(())
}

/// Mean per-window metric over a set, computed in parallel but reduced in
/// window order.
fn mean_over_windows<M, F>(model: &M, ws: &WindowSet, per_window: F) -> Result<f64>
where
    M: ForecastModel + Sync,
    F: Fn(&M, &Tensor, &Tensor) -> Result<f64> + Sync,
{
    let idx: Vec<usize> = (0..ws.len()).collect();
    let results = exec::map_items(&idx, |_, w: &usize| -> Result<f64> {
        let input = ws.input(*w)?;
        let target = ws.target(*w)?;
        per_window(model, &input, &target)
    });
    let mut sum = 0.0;
    for r in results {
        sum += r?;
    }
    Ok(sum / ws.len() as f64)
}

/// Validation MAE in evaluation mode, normalized scale.
pub fn validation_mae<M: ForecastModel + Sync>(model: &M, ws: &WindowSet) -> Result<f64> {
    check_windows(model, ws, "validation")?;
    mean_over_windows(model, ws, |m, x, y| {
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, &[]);
        let pred = m.predict(&mut tape, x, false, &mut rng)?;
        mean_absolute_loss(&mut tape, &pred, y)?.scalar_value()
    })
}

/// Full-pass model loss (including any regularizer) in evaluation mode.
fn full_train_loss<M: ForecastModel + Sync>(model: &M, ws: &WindowSet) -> Result<f64> {
    mean_over_windows(model, ws, |m, x, y| {
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, &[]);
        let pred = m.predict(&mut tape, x, false, &mut rng)?;
        m.loss(&mut tape, &pred, y)?.scalar_value()
    })
}

/// Runs the training loop. The model is left holding the parameters of its
/// best validation epoch (possibly the initial state). One row is returned
/// per completed epoch; a zero-epoch run returns an empty log and leaves the
/// model untouched.
pub fn train<M: ForecastModel + Sync>(
    model: &mut M,
    train_ws: &WindowSet,
    val_ws: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_windows(model, train_ws, "training")?;
    check_windows(model, val_ws, "validation")?;
    if cfg.phase == Phase::Adapt && model.frozen_param_count() == 0 {
        return Err(Error::State(
            "adaptation requires a model with a frozen backbone".to_string(),
        ));
    }

    let initial_train_loss = full_train_loss(model, train_ws)?;
    let initial_val_mae = validation_mae(model, val_ws)?;
    let mut best_val = initial_val_mae;
    let mut best_epoch = 0usize;
    let mut best_params = model.param_snapshot();

    let mut opt = OptimizerState::new(lr_at(&cfg.schedule, 0), cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(&cfg.schedule, epoch - 1);
        opt.lr = lr;

        let mut order: Vec<usize> = (0..train_ws.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &[1, epoch as u64]));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let step = global_step;
            let results = exec::map_items(chunk, |slot, w: &usize| -> Result<(f64, GradientMap)> {
                let input = train_ws.input(*w)?;
                let target = train_ws.target(*w)?;
                let mut tape = Tape::new();
                let mut rng = stream_rng(cfg.seed, &[2, epoch as u64, step, slot as u64]);
                let pred = model.predict(&mut tape, &input, true, &mut rng)?;
                let loss = model.loss(&mut tape, &pred, &target)?;
                let value = loss.scalar_value()?;
                let grads = tape.backward(&loss)?;
                Ok((value, grads))
            });

            let mut acc: BTreeMap<ParamId, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
            for (w, r) in chunk.iter().zip(results) {
                let (value, grads) = r?;
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        detail: format!("training loss became {value} on window {w}"),
                    });
                }
                loss_sum += value;
                for (id, g) in grads.iter() {
                    let slot = acc
                        .entry(id)
                        .or_insert_with(|| (vec![0.0; g.numel()], g.shape().to_vec()));
                    for (a, b) in slot.0.iter_mut().zip(g.values()) {
                        *a += b;
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            let mut averaged = GradientMap::default();
            for (id, (mut sum, shape)) in acc {
                for v in sum.iter_mut() {
                    *v *= inv;
                }
                averaged.insert(id, Tensor::new(shape, sum)?);
            }
            adam_step(&mut opt, &averaged, model)?;
            global_step += 1;
        }

        let train_loss = loss_sum / train_ws.len() as f64;
        let val_mae = validation_mae(model, val_ws)?;
        if !val_mae.is_finite() {
            return Err(Error::Divergence {
                epoch,
                detail: format!("validation error became {val_mae}"),
            });
        }
        if val_mae < best_val {
            best_val = val_mae;
            best_epoch = epoch;
            best_params = model.param_snapshot();
        }
        rows.push(EpochRow {
            epoch,
            train_loss,
            val_mae,
            lr,
        });
    }

    if !rows.is_empty() {
        model.restore_snapshot(&best_params)?;
    }
    Ok(TrainLog {
        initial_train_loss,
        initial_val_mae,
        rows,
        best_epoch,
        best_val_mae: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneKind, BackboneNet};
    use crate::data::{generate_synthetic, prepare, SplitSpec};
    use crate::nn::{linear_forward, LinearParams};
    use crate::tensor::Param;

    fn param_scalar(name: &str, v: f64) -> Param {
        Param::new(name, Tensor::scalar(v))
    }

    struct OneParam {
        p: Param,
    }

    impl Parameterized for OneParam {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.p);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.p);
        }
    }

    #[test]
    fn adam_first_step_matches_hand_recurrence() {
        let mut m = OneParam {
            p: param_scalar("w", 0.0),
        };
        let mut opt = OptimizerState::new(1e-3, 0.0);
        let mut grads = GradientMap::default();
        grads.insert(m.p.id(), Tensor::scalar(1.0));
        adam_step(&mut opt, &grads, &mut m).unwrap();
        // Bias-corrected m̂/√v̂ is exactly 1 on the first step.
        assert!((m.p.value().values()[0] + 1e-3).abs() < 1e-9);

        adam_step(&mut opt, &grads, &mut m).unwrap();
        assert!((m.p.value().values()[0] + 2e-3).abs() < 1e-8);
        assert_eq!(opt.step_count(), 2);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut m = OneParam {
            p: param_scalar("w", 0.7),
        };
        let mut opt = OptimizerState::new(1e-3, 0.0);
        adam_step(&mut opt, &GradientMap::default(), &mut m).unwrap();
        assert_eq!(m.p.value().values()[0], 0.7);

        let mut grads = GradientMap::default();
        grads.insert(m.p.id(), Tensor::scalar(0.0));
        adam_step(&mut opt, &grads, &mut m).unwrap();
        assert_eq!(m.p.value().values()[0], 0.7);
    }

    #[test]
    fn frozen_params_never_move() {
        let mut p = param_scalar("w", 0.5);
        p.set_frozen(true);
        let mut m = OneParam { p };
        let mut opt = OptimizerState::new(0.1, 0.1);
        let mut grads = GradientMap::default();
        grads.insert(m.p.id(), Tensor::scalar(10.0));
        adam_step(&mut opt, &grads, &mut m).unwrap();
        assert_eq!(m.p.value().values()[0], 0.5);
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        struct Two {
            w: Param,
            b: Param,
        }
        impl Parameterized for Two {
            fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
                f(&self.w);
                f(&self.b);
            }
            fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
                f(&mut self.w);
                f(&mut self.b);
            }
        }
        let mut m = Two {
            w: Param::new("w", Tensor::full(vec![2, 2], 2.0)),
            b: Param::new("b", Tensor::full(vec![2], 2.0)),
        };
        let mut opt = OptimizerState::new(0.1, 0.5);
        adam_step(&mut opt, &GradientMap::default(), &mut m).unwrap();
        // Matrix shrinks by exactly (1 - lr·wd); the vector is untouched.
        for v in m.w.value().values() {
            assert!((v - 2.0 * 0.95).abs() < 1e-12);
        }
        for v in m.b.value().values() {
            assert_eq!(*v, 2.0);
        }
    }

    #[test]
    fn wrong_gradient_shape_is_a_state_error() {
        let mut m = OneParam {
            p: param_scalar("w", 0.0),
        };
        let mut opt = OptimizerState::new(1e-3, 0.0);
        let mut grads = GradientMap::default();
        grads.insert(m.p.id(), Tensor::zeros(vec![3]));
        assert!(matches!(
            adam_step(&mut opt, &grads, &mut m),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn schedule_matches_published_rates() {
        let s = LrSchedule::default();
        for e in 0..10 {
            assert_eq!(lr_at(&s, e), 1e-3, "epoch {e}");
        }
        assert_eq!(lr_at(&s, 10), 1e-4);
        assert_eq!(lr_at(&s, 25), 1e-5);
        let mut prev = f64::INFINITY;
        for e in 0..60 {
            let lr = lr_at(&s, e);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    /// A purely linear forecaster: flatten the window, one affine map.
    /// Convex under MAE, so a small step must reduce the loss.
    struct LinearToy {
        map: LinearParams,
        s: usize,
        n: usize,
    }

    impl Parameterized for LinearToy {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            self.map.visit_params(f);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            self.map.visit_params_mut(f);
        }
    }

    impl ForecastModel for LinearToy {
        fn predict(
            &self,
            tape: &mut Tape,
            input: &Tensor,
            _training: bool,
            _rng: &mut ChaCha8Rng,
        ) -> Result<Tensor> {
            let flat = tape.reshape(input, vec![self.n, self.s])?;
            let out = linear_forward(tape, &self.map, &flat)?;
            tape.reshape(&out, vec![self.s, self.n, 1])
        }
        fn loss(&self, tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
            mean_absolute_loss(tape, prediction, target)
        }
        fn in_len(&self) -> usize {
            self.s
        }
        fn horizon(&self) -> usize {
            self.s
        }
        fn feat_dim(&self) -> usize {
            1
        }
    }

    fn toy_windows(n: usize) -> (crate::data::WindowSet, crate::data::WindowSet) {
        let ds = generate_synthetic(n, 260, 2, 0.05, 5).unwrap();
        let prepared = prepare(&ds, &SplitSpec::default(), 4, 4).unwrap();
        (prepared.train, prepared.val)
    }

    #[test]
    fn one_step_descends_on_a_convex_toy() {
        // The toy's reshape mixes the node and time axes, which is harmless
        // here: it stays one affine map of the window, convex under MAE.
        let ds = generate_synthetic(2, 260, 2, 0.05, 5).unwrap();
        let prepared = prepare(&ds, &SplitSpec::default(), 4, 4).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut toy = LinearToy {
            map: LinearParams::kaiming("w", 4, 4, &mut r).unwrap(),
            s: 4,
            n: 2,
        };
        let before = full_train_loss(&toy, &prepared.train).unwrap();

        // One full-batch gradient, one small Adam step, no schedule and no
        // best-validation restore in the way.
        let idx: Vec<usize> = (0..prepared.train.len()).collect();
        let mut acc: BTreeMap<ParamId, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
        for w in &idx {
            let mut tape = Tape::new();
            let mut rng = stream_rng(0, &[]);
            let input = prepared.train.input(*w).unwrap();
            let target = prepared.train.target(*w).unwrap();
            let pred = toy.predict(&mut tape, &input, true, &mut rng).unwrap();
            let loss = toy.loss(&mut tape, &pred, &target).unwrap();
            let grads = tape.backward(&loss).unwrap();
            for (id, g) in grads.iter() {
                let slot = acc
                    .entry(id)
                    .or_insert_with(|| (vec![0.0; g.numel()], g.shape().to_vec()));
                for (a, b) in slot.0.iter_mut().zip(g.values()) {
                    *a += b;
                }
            }
        }
        let mut grads = GradientMap::default();
        for (id, (mut sum, shape)) in acc {
            for v in sum.iter_mut() {
                *v /= idx.len() as f64;
            }
            grads.insert(id, Tensor::new(shape, sum).unwrap());
        }
        let mut opt = OptimizerState::new(1e-3, 0.0);
        adam_step(&mut opt, &grads, &mut toy).unwrap();

        let after = full_train_loss(&toy, &prepared.train).unwrap();
        assert!(
            after < before,
            "loss went from {before} to {after} after one step"
        );
    }

    #[test]
    fn zero_epochs_change_nothing_and_log_nothing() {
        let (train_ws, val_ws) = toy_windows(3);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 3);
        let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
        let before = net.param_snapshot();
        let cfg = TrainConfig::new(Phase::Pretrain, 0, 1);
        let log = train(&mut net, &train_ws, &val_ws, &cfg).unwrap();
        assert!(log.rows.is_empty());
        assert_eq!(log.best_epoch, 0);
        assert!(log.initial_val_mae.is_finite());
        let after = net.param_snapshot();
        for (a, b) in before.iter().zip(&after) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn training_is_reproducible_bit_for_bit() {
        let (train_ws, val_ws) = toy_windows(3);
        let run = || {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 3);
            let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
            let mut cfg = TrainConfig::new(Phase::Pretrain, 3, 77);
            cfg.batch_size = 8;
            let log = train(&mut net, &train_ws, &val_ws, &cfg).unwrap();
            (log, net.param_snapshot())
        };
        let (log_a, params_a) = run();
        let (log_b, params_b) = run();
        assert_eq!(log_a, log_b);
        for (a, b) in params_a.iter().zip(&params_b) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn model_is_left_at_its_best_validation_epoch() {
        let (train_ws, val_ws) = toy_windows(3);
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 3);
        let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
        let mut cfg = TrainConfig::new(Phase::Pretrain, 4, 13);
        cfg.batch_size = 16;
        let log = train(&mut net, &train_ws, &val_ws, &cfg).unwrap();
        let restored_mae = validation_mae(&net, &val_ws).unwrap();
        let mut best = log.initial_val_mae;
        for row in &log.rows {
            best = best.min(row.val_mae);
        }
        assert!((restored_mae - best).abs() < 1e-12);
        assert!((log.best_val_mae - best).abs() < 1e-12);
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (train_ws, val_ws) = toy_windows(3);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 3);
        let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
        let mut cfg = TrainConfig::new(Phase::Pretrain, 3, 5);
        cfg.schedule.base_lr = 1e200;
        cfg.batch_size = 8;
        match train(&mut net, &train_ws, &val_ws, &cfg) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn adapt_phase_requires_a_frozen_backbone() {
        let (train_ws, val_ws) = toy_windows(3);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 3);
        let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
        let cfg = TrainConfig::new(Phase::Adapt, 1, 5);
        assert!(matches!(
            train(&mut net, &train_ws, &val_ws, &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn mismatched_windows_are_rejected() {
        let (train_ws, val_ws) = toy_windows(3);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        // Model expects 5 nodes; windows carry 3.
        let cfg0 = BackboneConfig::new(BackboneKind::SharedMlp, 1, 4, 4, 5);
        let mut net = BackboneNet::build(cfg0, None, &mut r).unwrap();
        let cfg = TrainConfig::new(Phase::Pretrain, 1, 5);
        assert!(train(&mut net, &train_ws, &val_ws, &cfg).is_err());
    }
}
