//! Central-difference verification of analytic gradients.

use crate::error::{Error, Result};

use super::Tensor;

/// Compares an analytic gradient against a central finite difference of `f`
/// and returns the worst relative error over all coordinates of all
/// parameters: `|analytic - numeric| / max(1, |numeric|)`.
///
/// `f` must be a deterministic function of the parameter values. `point`
/// holds the values at which both gradients are taken, and `analytic` the
/// gradients produced by the tape, in the same order and shapes.
pub fn finite_difference_check<F>(
    f: &mut F,
    point: &[Tensor],
    analytic: &[Tensor],
    step: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::Argument(format!(
            "{} parameter tensors but {} analytic gradients",
            point.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Vec<f64>> = point.iter().map(|t| t.values().to_vec()).collect();
    let mut worst = 0.0f64;
    for pi in 0..point.len() {
        if analytic[pi].shape() != point[pi].shape() {
            return Err(Error::Argument(format!(
                "analytic gradient {pi} has a different shape from its parameter"
            )));
        }
        for ci in 0..work[pi].len() {
            let orig = work[pi][ci];

            work[pi][ci] = orig + step;
            let plus = eval(f, point, &work)?;
            work[pi][ci] = orig - step;
            let minus = eval(f, point, &work)?;
            work[pi][ci] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[pi].values()[ci];
            if !numeric.is_finite() || !exact.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at parameter {pi}, coordinate {ci} \
                     (analytic {exact}, numeric {numeric})"
                )));
            }
            let err = (exact - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn eval<F>(f: &mut F, point: &[Tensor], work: &[Vec<f64>]) -> Result<f64>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let tensors: Vec<Tensor> = point
        .iter()
        .zip(work.iter())
        .map(|(t, vals)| Tensor::new(t.shape().to_vec(), vals.clone()))
        .collect::<Result<Vec<_>>>()?;
    f(&tensors)
}
