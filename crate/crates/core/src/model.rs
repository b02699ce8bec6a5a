//! The interface shared by everything the trainer can fit: a forecasting
//! model maps an input window to a horizon prediction and scores predictions
//! with its own loss (which is how the adapted model folds its gain
//! regularizer in while plain backbones use the unweighted forecast error).

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Parameterized, Tape, Tensor};

pub trait ForecastModel: Parameterized {
    /// Maps `[in_len x nodes x features]` to `[horizon x nodes x features]`,
    /// recording onto the tape. `training` enables stochastic layers; `rng`
    /// drives them and is unused at evaluation time.
    fn predict(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor>;

    /// Scalar training loss for one window.
    fn loss(&self, tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor>;

    fn in_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn feat_dim(&self) -> usize;

    fn trainable_param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |p| {
            if !p.is_frozen() {
                n += p.value().numel() as u64;
            }
        });
        n
    }

    fn frozen_param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit_params(&mut |p| {
            if p.is_frozen() {
                n += p.value().numel() as u64;
            }
        });
        n
    }
}

/// The unweighted forecast error both model families share: mean absolute
/// difference over every (step, node, feature) element, which equals the
/// per-step mean error averaged over the horizon.
pub fn mean_absolute_loss(tape: &mut Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    let diff = tape.sub(target, prediction)?;
    let abs = tape.abs(&diff)?;
    tape.mean_all(&abs)
}
