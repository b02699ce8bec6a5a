//! Forecast quality metrics and parameter accounting.
//!
//! All error metrics are computed on the de-normalized scale: predictions
//! and targets are pushed back through the z-score statistics before any
//! difference is taken, so the numbers are in the units of the raw data.

use crate::data::{WindowSet, ZScoreStats};
use crate::error::{Error, Result};
use crate::exec;
use crate::model::ForecastModel;
use crate::tensor::{Parameterized, Tape};
use crate::train::stream_rng;

/// Targets with absolute value below this are excluded from MAPE, which is
/// undefined near zero.
pub const MAPE_MASK: f64 = 1e-3;

/// Errors for one horizon step. `mape` is `None` when every target at that
/// step was masked; report writers print it as `na`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: Option<f64>,
}

/// Parameter accounting, split by ownership. Backbone parameters are
/// recognized by their `backbone.` name prefix; every other *trainable*
/// parameter counts as adaptation. Frozen parameters outside the backbone
/// (the zero base maps inside adaptation blocks) are structural constants
/// and are not counted on either side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamReport {
    pub backbone_params: u64,
    pub adaptation_params: u64,
    /// `100 · adaptation / backbone`; zero when there is no backbone.
    pub overhead_percent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// One entry per horizon step, in forecast order.
    pub steps: Vec<StepMetrics>,
    /// Plain mean of the per-step values. The average MAPE covers only the
    /// steps where it was defined.
    pub average: StepMetrics,
    pub params: ParamReport,
}

pub fn param_report(model: &dyn Parameterized) -> ParamReport {
    let mut backbone = 0u64;
    let mut adaptation = 0u64;
    model.visit_params(&mut |p| {
        if p.name().starts_with("backbone.") {
            backbone += p.value().numel() as u64;
        } else if !p.is_frozen() {
            adaptation += p.value().numel() as u64;
        }
    });
    let overhead_percent = if backbone > 0 {
        100.0 * adaptation as f64 / backbone as f64
    } else {
        0.0
    };
    ParamReport {
        backbone_params: backbone,
        adaptation_params: adaptation,
        overhead_percent,
    }
}

#[derive(Clone, Copy, Default)]
struct StepAccum {
    abs: f64,
    sq: f64,
    n: u64,
    ape: f64,
    ape_n: u64,
}

/// Evaluates the model over every window, in evaluation mode, and reports
/// per-step and averaged errors on the de-normalized scale.
pub fn evaluate<M: ForecastModel + Sync>(
    model: &M,
    windows: &WindowSet,
    stats: &ZScoreStats,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Argument("cannot evaluate on zero windows".to_string()));
    }
    if windows.in_len() != model.in_len()
        || windows.horizon() != model.horizon()
        || windows.feat_dim() != model.feat_dim()
    {
        return Err(Error::dim(format!(
            "windows are {}-in/{}-out with {} features, model expects {}/{}/{}",
            windows.in_len(),
            windows.horizon(),
            windows.feat_dim(),
            model.in_len(),
            model.horizon(),
            model.feat_dim()
        )));
    }
    let horizon = windows.horizon();
    let per_step = horizon.max(1);

    let idx: Vec<usize> = (0..windows.len()).collect();
    let partials = exec::map_items(&idx, |_, w: &usize| -> Result<Vec<StepAccum>> {
        let input = windows.input(*w)?;
        let target = windows.target(*w)?;
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, &[]);
        let pred = model.predict(&mut tape, &input, false, &mut rng)?;
        let pred = stats.invert(&pred)?;
        let target = stats.invert(&target)?;
        let step_len = pred.numel() / horizon;
        let mut acc = vec![StepAccum::default(); per_step];
        for t in 0..horizon {
            let a = &mut acc[t];
            for i in 0..step_len {
                let p = pred.values()[t * step_len + i];
                let y = target.values()[t * step_len + i];
                let e = p - y;
                a.abs += e.abs();
                a.sq += e * e;
                a.n += 1;
                if y.abs() >= MAPE_MASK {
                    a.ape += (e / y).abs();
                    a.ape_n += 1;
                }
            }
        }
        Ok(acc)
    });

    let mut totals = vec![StepAccum::default(); per_step];
    for partial in partials {
        for (t, a) in partial?.into_iter().enumerate() {
            totals[t].abs += a.abs;
            totals[t].sq += a.sq;
            totals[t].n += a.n;
            totals[t].ape += a.ape;
            totals[t].ape_n += a.ape_n;
        }
    }

    let steps: Vec<StepMetrics> = totals
        .iter()
        .map(|a| StepMetrics {
            mae: a.abs / a.n as f64,
            rmse: (a.sq / a.n as f64).sqrt(),
            mape: if a.ape_n > 0 {
                Some(100.0 * a.ape / a.ape_n as f64)
            } else {
                None
            },
        })
        .collect();

    let k = steps.len() as f64;
    let mape_values: Vec<f64> = steps.iter().filter_map(|s| s.mape).collect();
    let average = StepMetrics {
        mae: steps.iter().map(|s| s.mae).sum::<f64>() / k,
        rmse: steps.iter().map(|s| s.rmse).sum::<f64>() / k,
        mape: if mape_values.is_empty() {
            None
        } else {
            Some(mape_values.iter().sum::<f64>() / mape_values.len() as f64)
        },
    };

    Ok(MetricsReport {
        steps,
        average,
        params: param_report(model),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{backbone_param_count, BackboneConfig, BackboneKind, BackboneNet};
    use crate::data::{generate_synthetic, make_windows, prepare, SplitSpec};
    use crate::fusion::{stlora_adaptation_count, StLoraConfig, StLoraModel};
    use crate::model::mean_absolute_loss;
    use crate::tensor::{Param, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Predicts zero (normalized scale) everywhere; no parameters.
    struct ZeroModel {
        horizon: usize,
        nodes: usize,
    }

    impl Parameterized for ZeroModel {
        fn visit_params(&self, _f: &mut dyn FnMut(&Param)) {}
        fn visit_params_mut(&mut self, _f: &mut dyn FnMut(&mut Param)) {}
    }

    impl ForecastModel for ZeroModel {
        fn predict(
            &self,
            _tape: &mut Tape,
            _input: &Tensor,
            _training: bool,
            _rng: &mut ChaCha8Rng,
        ) -> Result<Tensor> {
            Ok(Tensor::zeros(vec![self.horizon, self.nodes, 1]))
        }
        fn loss(&self, tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
            mean_absolute_loss(tape, prediction, target)
        }
        fn in_len(&self) -> usize {
            1
        }
        fn horizon(&self) -> usize {
            self.horizon
        }
        fn feat_dim(&self) -> usize {
            1
        }
    }

    fn identity_stats() -> ZScoreStats {
        ZScoreStats {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    fn one_window(target_values: &[f64]) -> WindowSet {
        // Two frames per node stream: frame 0 feeds the input window, frame
        // 1 is the one-step target.
        let n = target_values.len();
        let mut values = vec![0.0; n];
        values.extend_from_slice(target_values);
        let frames = Tensor::new(vec![2, n, 1], values).unwrap();
        make_windows(&frames, 1, 1).unwrap()
    }

    #[test]
    fn hand_fixture_mae_rmse_mape() {
        let ws = one_window(&[3.0, 4.0]);
        let model = ZeroModel {
            horizon: 1,
            nodes: 2,
        };
        let report = evaluate(&model, &ws, &identity_stats()).unwrap();
        assert_eq!(report.steps.len(), 1);
        let s = report.steps[0];
        assert!((s.mae - 3.5).abs() < 1e-12);
        assert!((s.rmse - 12.5f64.sqrt()).abs() < 1e-12);
        assert!((s.mape.unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(report.average, report.steps[0]);
    }

    #[test]
    fn errors_are_measured_after_denormalization() {
        // Raw targets 3 and 4 under mean 10, std 2; the zero prediction
        // de-normalizes to 10, so the raw errors are 7 and 6.
        let stats = ZScoreStats {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let ws = one_window(&[-3.5, -3.0]);
        let model = ZeroModel {
            horizon: 1,
            nodes: 2,
        };
        let report = evaluate(&model, &ws, &stats).unwrap();
        assert!((report.steps[0].mae - 6.5).abs() < 1e-12);
    }

    #[test]
    fn near_zero_targets_are_masked_out_of_mape() {
        let ws = one_window(&[0.0005, 4.0]);
        let model = ZeroModel {
            horizon: 1,
            nodes: 2,
        };
        let report = evaluate(&model, &ws, &identity_stats()).unwrap();
        // Only the target 4 survives the mask: |0 - 4| / 4 = 100%.
        assert!((report.steps[0].mape.unwrap() - 100.0).abs() < 1e-12);
        // MAE still sees every element.
        assert!((report.steps[0].mae - (0.0005 + 4.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_targets_leave_mape_undefined() {
        let ws = one_window(&[0.0, 0.0002]);
        let model = ZeroModel {
            horizon: 1,
            nodes: 2,
        };
        let report = evaluate(&model, &ws, &identity_stats()).unwrap();
        assert_eq!(report.steps[0].mape, None);
        assert_eq!(report.average.mape, None);
    }

    #[test]
    fn mismatched_horizon_is_rejected() {
        let ws = one_window(&[1.0, 2.0]);
        let model = ZeroModel {
            horizon: 2,
            nodes: 2,
        };
        assert!(evaluate(&model, &ws, &identity_stats()).is_err());
    }

    #[test]
    fn report_matches_a_scalar_loop_oracle() {
        let ds = generate_synthetic(4, 300, 2, 0.1, 31).unwrap();
        let prepared = prepare(&ds, &SplitSpec::default(), 6, 3).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let cfg = BackboneConfig::new(BackboneKind::SharedMlp, 1, 6, 3, 4);
        let net = BackboneNet::build(cfg, None, &mut r).unwrap();
        let report = evaluate(&net, &prepared.test, &prepared.stats).unwrap();

        // Independent accumulation: sequential loops, no shared helpers.
        let ws = &prepared.test;
        let mean = prepared.stats.mean[0];
        let std = prepared.stats.std[0];
        let mut abs = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        let mut n = vec![0u64; 3];
        let mut ape = vec![0.0; 3];
        let mut ape_n = vec![0u64; 3];
        for w in 0..ws.len() {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let input = ws.input(w).unwrap();
            let target = ws.target(w).unwrap();
            let pred = net.predict(&mut tape, &input, false, &mut rng).unwrap();
            for t in 0..3 {
                for node in 0..4 {
                    let i = t * 4 + node;
                    let p = pred.values()[i] * std + mean;
                    let y = target.values()[i] * std + mean;
                    abs[t] += (p - y).abs();
                    sq[t] += (p - y) * (p - y);
                    n[t] += 1;
                    if y.abs() >= 1e-3 {
                        ape[t] += ((p - y) / y).abs();
                        ape_n[t] += 1;
                    }
                }
            }
        }
        for t in 0..3 {
            let mae = abs[t] / n[t] as f64;
            let rmse = (sq[t] / n[t] as f64).sqrt();
            assert!((report.steps[t].mae - mae).abs() < 1e-9, "step {t} mae");
            assert!((report.steps[t].rmse - rmse).abs() < 1e-9, "step {t} rmse");
            if ape_n[t] > 0 {
                let mape = 100.0 * ape[t] / ape_n[t] as f64;
                assert!((report.steps[t].mape.unwrap() - mape).abs() < 1e-7);
            }
            // Root-mean-square dominates the mean absolute error.
            assert!(report.steps[t].rmse >= report.steps[t].mae - 1e-12);
        }
        assert!(report.average.rmse >= report.average.mae - 1e-12);
    }

    #[test]
    fn parameter_report_splits_backbone_from_adaptation() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let bb_cfg = {
            let mut c = BackboneConfig::new(BackboneKind::SharedMlp, 1, 12, 12, 20);
            c.hidden_dim = 64;
            c
        };
        let net = BackboneNet::build(bb_cfg.clone(), None, &mut r).unwrap();
        let plain = param_report(&net);
        assert_eq!(plain.backbone_params, 1_612);
        assert_eq!(plain.backbone_params, backbone_param_count(&bb_cfg).unwrap());
        assert_eq!(plain.adaptation_params, 0);
        assert_eq!(plain.overhead_percent, 0.0);

        let net2 = BackboneNet::build(bb_cfg, None, &mut r).unwrap();
        let st_cfg = {
            let mut c = StLoraConfig::default();
            c.hidden_dim = 8;
            c.layers = 4;
            c.rank = 8;
            c
        };
        let model = StLoraModel::build(net2, st_cfg.clone(), &mut r).unwrap();
        let report = param_report(&model);
        assert_eq!(report.backbone_params, 1_612);
        assert_eq!(
            report.adaptation_params,
            stlora_adaptation_count(&st_cfg, 1, 12, 20).unwrap()
        );
        assert_eq!(report.adaptation_params, model.adaptation_param_count());
        let expect = 100.0 * report.adaptation_params as f64 / 1_612.0;
        assert!((report.overhead_percent - expect).abs() < 1e-12);
    }
}
