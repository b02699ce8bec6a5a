//! Dense 64-bit tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable row-major buffer plus a shape. Differentiable
//! computation happens on a [`Tape`]: operations record enough information to
//! replay themselves in reverse, and [`Tape::backward`] walks the recording
//! once to produce a [`GradientMap`] for every trainable [`Param`] that
//! influenced the loss. One tape corresponds to one forward pass; tapes are
//! cheap to create and are dropped afterwards.
//!
//! Values are `f64` throughout. Buffers are shared via `Arc`, so cloning a
//! tensor never copies data.

mod fd;
mod tape;

pub use fd::finite_difference_check;
pub use tape::Tape;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Negative-side slope shared by every leaky rectifier in the stack.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Reference to a node on a specific tape. The tape id guards against
/// accidentally mixing tensors from two different recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct TapeRef {
    pub(crate) tape: u64,
    pub(crate) node: usize,
}

/// Immutable row-major array of `f64` values.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<TapeRef>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major values.
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::dim(format!(
                "shape {} implies {} values, got {}",
                fmt_shape(&shape),
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(values),
            requires_grad: false,
            node: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Tensor {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![value; numel]),
            requires_grad: false,
            node: None,
        }
    }

    /// One-element tensor, used for scalar losses and learnable scalars.
    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            requires_grad: false,
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a one-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Argument(format!(
                "expected a one-element tensor, got shape {}",
                fmt_shape(&self.shape)
            )));
        }
        Ok(self.data[0])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {}",
                fmt_shape(&self.shape),
                fmt_shape(&shape)
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
        })
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }

    pub(crate) fn node_ref(&self) -> Option<TapeRef> {
        self.node
    }

    pub(crate) fn from_parts(
        shape: Vec<usize>,
        data: Arc<Vec<f64>>,
        requires_grad: bool,
        node: Option<TapeRef>,
    ) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad,
            node,
        }
    }
}

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Stable identity of a trainable parameter. Gradient maps and optimizer
/// moment slots are keyed by this id, never by name or position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

/// A named, possibly frozen parameter tensor.
///
/// Freezing excludes the parameter from gradients and optimizer updates while
/// leaving its value in place, which is how a pretrained backbone is held
/// fixed during adaptation.
#[derive(Debug, Clone)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
    frozen: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Param {
        Param {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor) -> Param {
        let mut p = Param::new(name, value);
        p.frozen = true;
        p
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Replaces the value; the new tensor must keep the existing shape.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::dim(format!(
                "parameter `{}` has shape {}, replacement has {}",
                self.name,
                fmt_shape(self.value.shape()),
                fmt_shape(value.shape())
            )));
        }
        self.value = value;
        Ok(())
    }
}

/// Gradients of a scalar loss with respect to the trainable parameters that
/// influenced it, keyed by parameter identity.
#[derive(Debug, Default, Clone)]
pub struct GradientMap {
    grads: BTreeMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, param: &Param) -> Option<&Tensor> {
        self.grads.get(&param.id)
    }

    pub fn get_id(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub(crate) fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.grads.insert(id, grad);
    }
}

/// Visitor over the parameters of a model or layer, in a stable order.
/// Checkpoints, optimizers and parameter accounting all rely on the order
/// being the same every time for the same structure.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// All parameters cloned in visit order; handy for snapshots.
    fn param_snapshot(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push(p.value().clone()));
        out
    }

    /// Restores a snapshot taken with [`Parameterized::param_snapshot`].
    fn restore_snapshot(&mut self, snapshot: &[Tensor]) -> Result<()> {
        let mut idx = 0;
        let mut result = Ok(());
        self.visit_params_mut(&mut |p| {
            if result.is_err() {
                return;
            }
            match snapshot.get(idx) {
                Some(t) => {
                    if let Err(e) = p.set_value(t.clone()) {
                        result = Err(e);
                    }
                }
                None => {
                    result = Err(Error::State(
                        "parameter snapshot shorter than model".to_string(),
                    ));
                }
            }
            idx += 1;
        });
        result?;
        let mut total = 0;
        self.visit_params(&mut |_| total += 1);
        if idx != snapshot.len() {
            return Err(Error::State(format!(
                "parameter snapshot has {} entries, model has {}",
                snapshot.len(),
                total
            )));
        }
        Ok(())
    }
}

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".to_string();
    }
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

/// Plain (untaped) matrix product `a[m x k] * b[k x n]`, used by oracle-style
/// utilities that never need gradients.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
