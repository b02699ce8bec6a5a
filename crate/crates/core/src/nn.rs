//! Neural-network building blocks used by every model in the crate: shared
//! affine maps, time-axis convolution, RMS normalization, inverted dropout
//! and Kaiming initialization.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Param, Parameterized, Tape, Tensor};

/// Default keep-probability complement for dropout layers.
pub const DEFAULT_DROPOUT: f64 = 0.3;

/// Default denominator guard for RMS normalization.
pub const DEFAULT_RMS_EPS: f64 = 1e-8;

/// Draws `shape` values i.i.d. from a zero-mean normal with variance
/// `2 / fan_in`, the scaling that keeps rectified activations from shrinking
/// or exploding as depth grows.
pub fn kaiming_init<R: Rng>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::Argument("kaiming_init needs fan_in >= 1".to_string()));
    }
    let shape = shape.into();
    let numel: usize = shape.iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let values = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, values)
}

/// An affine map `y = x W^T + b` applied to the trailing axis, shared across
/// all leading axes. Weights are stored one row per output feature.
#[derive(Debug, Clone)]
pub struct LinearParams {
    pub weight: Param,
    pub bias: Param,
}

impl LinearParams {
    /// Kaiming-initialized weights, zero bias.
    pub fn kaiming<R: Rng>(name: &str, d_out: usize, d_in: usize, rng: &mut R) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: Param::new(format!("{name}.weight"), kaiming_init(vec![d_out, d_in], d_in, rng)?),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
        })
    }

    /// All-zero affine map. Frozen zero maps serve as inert base layers whose
    /// output is exactly zero regardless of input.
    pub fn zeros(name: &str, d_out: usize, d_in: usize) -> LinearParams {
        LinearParams {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(vec![d_out, d_in])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
        }
    }

    pub fn from_values(name: &str, weight: Tensor, bias: Tensor) -> Result<LinearParams> {
        let (d_out, _) = match weight.shape() {
            [o, i] => (*o, *i),
            _ => return Err(Error::dim("linear weight must be 2-d".to_string())),
        };
        if bias.shape() != [d_out] {
            return Err(Error::dim(format!(
                "linear bias must have {d_out} entries"
            )));
        }
        Ok(LinearParams {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.set_frozen(frozen);
        self.bias.set_frozen(frozen);
    }
}

impl Parameterized for LinearParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Applies the affine map to the trailing axis of `x`, which may have any
/// number of leading axes.
pub fn linear_forward(tape: &mut Tape, p: &LinearParams, x: &Tensor) -> Result<Tensor> {
    let d_in = p.d_in();
    let d_out = p.d_out();
    match x.shape().last() {
        Some(&last) if last == d_in => {}
        _ => {
            return Err(Error::dim(format!(
                "linear of width {d_in} applied to trailing extent of {:?}",
                x.shape()
            )))
        }
    }
    let rows = x.numel() / d_in;
    let w = tape.param(&p.weight);
    let b = tape.param(&p.bias);
    let flat = tape.reshape(x, vec![rows, d_in])?;
    let y = tape.matmul_nt(&flat, &w)?;
    let y = tape.add_bias(&y, &b)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    tape.reshape(&y, shape)
}

/// A 1-d convolution along the time axis of `[t x n x d_in]` inputs with zero
/// padding, mixing feature channels and leaving nodes untouched.
#[derive(Debug, Clone)]
pub struct TemporalConvParams {
    pub kernel: Param,
    pub bias: Param,
}

impl TemporalConvParams {
    pub fn kaiming<R: Rng>(
        name: &str,
        d_out: usize,
        d_in: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<TemporalConvParams> {
        if width % 2 == 0 {
            return Err(Error::Argument(format!(
                "temporal kernel width must be odd, got {width}"
            )));
        }
        Ok(TemporalConvParams {
            kernel: Param::new(
                format!("{name}.kernel"),
                kaiming_init(vec![d_out, d_in, width], d_in * width, rng)?,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(vec![d_out])),
        })
    }

    pub fn from_values(name: &str, kernel: Tensor, bias: Tensor) -> Result<TemporalConvParams> {
        match kernel.shape() {
            [_, _, k] if k % 2 == 1 => {}
            [_, _, k] => {
                return Err(Error::Argument(format!(
                    "temporal kernel width must be odd, got {k}"
                )))
            }
            _ => return Err(Error::dim("temporal kernel must be 3-d".to_string())),
        }
        Ok(TemporalConvParams {
            kernel: Param::new(format!("{name}.kernel"), kernel),
            bias: Param::new(format!("{name}.bias"), bias),
        })
    }

    pub fn width(&self) -> usize {
        self.kernel.value().shape()[2]
    }
}

impl Parameterized for TemporalConvParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.kernel);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.kernel);
        f(&mut self.bias);
    }
}

pub fn temporal_conv_forward(tape: &mut Tape, p: &TemporalConvParams, x: &Tensor) -> Result<Tensor> {
    let kernel = tape.param(&p.kernel);
    let bias = tape.param(&p.bias);
    tape.temporal_conv(x, &kernel, &bias)
}

/// Root-mean-square normalization over the trailing axis with a learnable
/// per-feature gain.
#[derive(Debug, Clone)]
pub struct RmsNormParams {
    pub gain: Param,
    pub eps: f64,
}

impl RmsNormParams {
    /// Unit gain, which leaves directions unchanged and only rescales rows.
    pub fn unit(name: &str, d: usize) -> RmsNormParams {
        RmsNormParams {
            gain: Param::new(format!("{name}.gain"), Tensor::full(vec![d], 1.0)),
            eps: DEFAULT_RMS_EPS,
        }
    }
}

impl Parameterized for RmsNormParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gain);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gain);
    }
}

pub fn rmsnorm_forward(tape: &mut Tape, p: &RmsNormParams, x: &Tensor) -> Result<Tensor> {
    let gain = tape.param(&p.gain);
    tape.rms_norm(x, &gain, p.eps)
}

/// Inverted dropout: during training each element is zeroed with probability
/// `p` and survivors are scaled by `1/(1-p)`, so the expectation matches the
/// identity the layer becomes at evaluation time.
pub fn dropout_forward<R: Rng>(
    tape: &mut Tape,
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Argument(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
        .collect();
    let mask = Tensor::new(x.shape().to_vec(), mask)?;
    tape.mul(x, &mask)
}
