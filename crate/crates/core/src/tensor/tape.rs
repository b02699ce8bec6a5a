//! The Wengert tape: records forward operations, replays them in reverse.
//!
//! Every operation appends one node holding the output buffer plus the op
//! metadata needed for its vector-Jacobian product. Operands that are not yet
//! on the tape (inputs, targets, dropout masks, other constants) are
//! registered as non-differentiable leaves on first use; parameters are bound
//! through [`Tape::param`], which caches the binding so that a parameter used
//! several times in one pass owns a single leaf and therefore accumulates all
//! of its gradient contributions.
//!
//! A tape is single-use: after [`Tape::backward`] it refuses further work.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::{fmt_shape, GradientMap, Param, ParamId, TapeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// a[m x k] * b[k x n]
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// a[m x k] * b[n x k]^T -- the row-by-row dot-product form
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// Elementwise; `b` may be a one-element tensor broadcast over `a`.
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    LeakyRelu { a: usize, slope: f64 },
    Relu { a: usize },
    Sigmoid { a: usize },
    Abs { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    /// Concatenation along the trailing axis; rows = product of leading dims.
    ConcatLast { a: usize, b: usize, rows: usize, da: usize, db: usize },
    /// Elementwise mean of several same-shaped tensors.
    MeanStack { xs: Vec<usize> },
    MeanAll { a: usize },
    SumAll { a: usize },
    /// Euclidean norm of all elements, as a one-element tensor.
    L2Norm { a: usize },
    Reshape { a: usize },
    /// Transpose of the two leading axes of a 2- or 3-d tensor.
    Swap01 { a: usize, d0: usize, d1: usize, rest: usize },
    /// x[rows x d] + bias[d] broadcast over rows.
    AddBias { a: usize, bias: usize, rows: usize, d: usize },
    /// 1-d convolution over the leading (time) axis with zero padding,
    /// mixing the trailing feature axis, leaving the node axis untouched.
    TemporalConv {
        x: usize,
        kernel: usize,
        bias: usize,
        t: usize,
        n: usize,
        din: usize,
        dout: usize,
        k: usize,
    },
    /// Root-mean-square normalization over the trailing axis with a gain.
    RmsNorm { x: usize, gain: usize, rows: usize, d: usize, eps: f64 },
    /// Per-node affine map: out[t,n,:] = w[n] . x[t,n,:] for w[n] of shape q x din.
    PerNodeLinear { x: usize, w: usize, t: usize, n: usize, din: usize, q: usize },
}

/// Recording of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    bindings: BTreeMap<ParamId, usize>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bindings: BTreeMap::new(),
            consumed: false,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::State(
                "tape already consumed by backward".to_string(),
            ));
        }
        Ok(())
    }

    /// Binds a parameter as a differentiable leaf (unless frozen). Repeated
    /// binds of the same parameter return the same node.
    pub fn param(&mut self, p: &Param) -> Tensor {
        if let Some(&idx) = self.bindings.get(&p.id()) {
            let node = &self.nodes[idx];
            return Tensor::from_parts(
                node.shape.clone(),
                Arc::clone(&node.data),
                node.needs_grad,
                Some(TapeRef { tape: self.id, node: idx }),
            );
        }
        let needs = !p.is_frozen();
        let idx = self.push_leaf(p.value(), needs);
        self.bindings.insert(p.id(), idx);
        self.out_tensor(idx)
    }

    fn push_leaf(&mut self, t: &Tensor, needs_grad: bool) -> usize {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: Arc::clone(t.data_arc()),
            needs_grad,
            op: Op::Leaf,
        });
        self.nodes.len() - 1
    }

    /// Node index for an operand, registering constants on first use.
    fn operand(&mut self, t: &Tensor) -> Result<usize> {
        match t.node_ref() {
            Some(r) => {
                if r.tape != self.id {
                    return Err(Error::State(
                        "tensor belongs to a different tape".to_string(),
                    ));
                }
                Ok(r.node)
            }
            None => Ok(self.push_leaf(t, t.requires_grad())),
        }
    }

    fn out_tensor(&self, idx: usize) -> Tensor {
        let node = &self.nodes[idx];
        Tensor::from_parts(
            node.shape.clone(),
            Arc::clone(&node.data),
            node.needs_grad,
            Some(TapeRef { tape: self.id, node: idx }),
        )
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> Tensor {
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            needs_grad,
            op,
        });
        self.out_tensor(self.nodes.len() - 1)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    // ---- matrix products ----------------------------------------------

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (m, k) = as_2d(a)?;
        let (k2, n) = as_2d(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner extents differ: {} vs {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        }
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let out = super::matmul_raw(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n);
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push_op(vec![m, n], out, needs, Op::Matmul { a: ai, b: bi, m, k, n }))
    }

    /// `a[m x k] * b[n x k]^T`. This is the natural orientation for affine
    /// layers whose weights are stored one output row per output feature.
    pub fn matmul_nt(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (m, k) = as_2d(a)?;
        let (n, k2) = as_2d(b)?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul_nt trailing extents differ: {} vs {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        }
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let av = Arc::clone(&self.nodes[ai].data);
        let bv = Arc::clone(&self.nodes[bi].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &bv[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                *o = s;
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push_op(vec![m, n], out, needs, Op::MatmulNt { a: ai, b: bi, m, k, n }))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_check(&self, a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
        if a.shape() == b.shape() || b.numel() == 1 {
            Ok(())
        } else {
            Err(Error::dim(format!(
                "{op} operands must share a shape (or the second be one-element): {} vs {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )))
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        self.binary_check(a, b, "add")?;
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let (av, bv) = (&self.nodes[ai].data, &self.nodes[bi].data);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x + bv[0]).collect()
        } else {
            av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
        };
        let needs = self.needs(ai) || self.needs(bi);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Add { a: ai, b: bi }))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        self.binary_check(a, b, "sub")?;
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let (av, bv) = (&self.nodes[ai].data, &self.nodes[bi].data);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x - bv[0]).collect()
        } else {
            av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
        };
        let needs = self.needs(ai) || self.needs(bi);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Sub { a: ai, b: bi }))
    }

    /// Elementwise (Hadamard) product; also the scalar-gain product when `b`
    /// has one element.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        self.binary_check(a, b, "mul")?;
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let (av, bv) = (&self.nodes[ai].data, &self.nodes[bi].data);
        let out = if bv.len() == 1 {
            av.iter().map(|x| x * bv[0]).collect()
        } else {
            av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
        };
        let needs = self.needs(ai) || self.needs(bi);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Mul { a: ai, b: bi }))
    }

    /// Multiplication by a compile-time constant (not differentiated through).
    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let out = self.nodes[ai].data.iter().map(|x| x * c).collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Scale { a: ai, c }))
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f64) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let out = self.nodes[ai]
            .data
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::LeakyRelu { a: ai, slope }))
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let out = self.nodes[ai].data.iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Relu { a: ai }))
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let out = self.nodes[ai]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Sigmoid { a: ai }))
    }

    pub fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let out = self.nodes[ai].data.iter().map(|x| x.abs()).collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Abs { a: ai }))
    }

    /// Clamps values into `[lo, hi]`; gradient passes through strictly inside
    /// the interval and is zero elsewhere.
    pub fn clamp(&mut self, a: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
        self.check_live()?;
        if !(lo < hi) {
            return Err(Error::Argument(format!("clamp needs lo < hi, got {lo} >= {hi}")));
        }
        let ai = self.operand(a)?;
        let out = self.nodes[ai].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let needs = self.needs(ai);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::Clamp { a: ai, lo, hi }))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates two tensors along the trailing (feature) axis. All
    /// leading extents must match; the second tensor may be feature-empty.
    pub fn concat_features(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        if a.shape().is_empty()
            || a.shape().len() != b.shape().len()
            || a.shape()[..a.shape().len() - 1] != b.shape()[..b.shape().len() - 1]
        {
            return Err(Error::dim(format!(
                "concat_features needs equal leading extents: {} vs {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        }
        let last = a.shape().len() - 1;
        let (da, db) = (a.shape()[last], b.shape()[last]);
        let rows: usize = a.shape()[..last].iter().product();
        let ai = self.operand(a)?;
        let bi = self.operand(b)?;
        let (av, bv) = (&self.nodes[ai].data, &self.nodes[bi].data);
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&av[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv[r * db..(r + 1) * db]);
        }
        let mut shape = a.shape().to_vec();
        shape[last] = da + db;
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push_op(shape, out, needs, Op::ConcatLast { a: ai, b: bi, rows, da, db }))
    }

    /// Elementwise mean of one or more same-shaped tensors.
    pub fn reduce_mean(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        self.check_live()?;
        if xs.is_empty() {
            return Err(Error::Argument("reduce_mean over an empty list".to_string()));
        }
        let shape = xs[0].shape().to_vec();
        for x in xs.iter().skip(1) {
            if x.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "reduce_mean inputs differ: {} vs {}",
                    fmt_shape(&shape),
                    fmt_shape(x.shape())
                )));
            }
        }
        let idxs = xs
            .iter()
            .map(|x| self.operand(x))
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / idxs.len() as f64;
        let numel: usize = shape.iter().product();
        let mut out = vec![0.0; numel];
        for &i in &idxs {
            for (o, v) in out.iter_mut().zip(self.nodes[i].data.iter()) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= inv;
        }
        let needs = idxs.iter().any(|&i| self.needs(i));
        Ok(self.push_op(shape, out, needs, Op::MeanStack { xs: idxs }))
    }

    pub fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        if a.numel() == 0 {
            return Err(Error::Argument("mean_all of an empty tensor".to_string()));
        }
        let ai = self.operand(a)?;
        let s: f64 = self.nodes[ai].data.iter().sum();
        let v = s / a.numel() as f64;
        let needs = self.needs(ai);
        Ok(self.push_op(vec![1], vec![v], needs, Op::MeanAll { a: ai }))
    }

    pub fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let s: f64 = self.nodes[ai].data.iter().sum();
        let needs = self.needs(ai);
        Ok(self.push_op(vec![1], vec![s], needs, Op::SumAll { a: ai }))
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let ai = self.operand(a)?;
        let s: f64 = self.nodes[ai].data.iter().map(|x| x * x).sum();
        let needs = self.needs(ai);
        Ok(self.push_op(vec![1], vec![s.sqrt()], needs, Op::L2Norm { a: ai }))
    }

    pub fn reshape(&mut self, a: &Tensor, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        self.check_live()?;
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != a.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {} into {}",
                fmt_shape(a.shape()),
                fmt_shape(&shape)
            )));
        }
        let ai = self.operand(a)?;
        let out = self.nodes[ai].data.to_vec();
        let needs = self.needs(ai);
        Ok(self.push_op(shape, out, needs, Op::Reshape { a: ai }))
    }

    /// Swaps the two leading axes of a 2-d or 3-d tensor.
    pub fn swap01(&mut self, a: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (d0, d1, rest) = match a.shape() {
            [d0, d1] => (*d0, *d1, 1),
            [d0, d1, d2] => (*d0, *d1, *d2),
            _ => {
                return Err(Error::dim(format!(
                    "swap01 needs a 2-d or 3-d tensor, got {}",
                    fmt_shape(a.shape())
                )))
            }
        };
        let ai = self.operand(a)?;
        let av = &self.nodes[ai].data;
        let mut out = vec![0.0; av.len()];
        for i in 0..d0 {
            for j in 0..d1 {
                let src = (i * d1 + j) * rest;
                let dst = (j * d0 + i) * rest;
                out[dst..dst + rest].copy_from_slice(&av[src..src + rest]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.swap(0, 1);
        let needs = self.needs(ai);
        Ok(self.push_op(shape, out, needs, Op::Swap01 { a: ai, d0, d1, rest }))
    }

    /// Adds a bias vector to every row of a 2-d tensor.
    pub fn add_bias(&mut self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (rows, d) = as_2d(a)?;
        if bias.shape() != [d] {
            return Err(Error::dim(format!(
                "bias {} does not match row width of {}",
                fmt_shape(bias.shape()),
                fmt_shape(a.shape())
            )));
        }
        let ai = self.operand(a)?;
        let bi = self.operand(bias)?;
        let (av, bv) = (&self.nodes[ai].data, &self.nodes[bi].data);
        let mut out = Vec::with_capacity(rows * d);
        for r in 0..rows {
            for j in 0..d {
                out.push(av[r * d + j] + bv[j]);
            }
        }
        let needs = self.needs(ai) || self.needs(bi);
        Ok(self.push_op(vec![rows, d], out, needs, Op::AddBias { a: ai, bias: bi, rows, d }))
    }

    /// 1-d convolution along the leading time axis of `x[t x n x din]` with
    /// an odd-width kernel `[dout x din x k]`, zero padding outside the
    /// sequence, and a per-output-channel bias. The node axis is untouched.
    pub fn temporal_conv(&mut self, x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (t, n, din) = as_3d(x)?;
        let (dout, kin, k) = as_3d(kernel)?;
        if kin != din {
            return Err(Error::dim(format!(
                "kernel {} does not accept input features of {}",
                fmt_shape(kernel.shape()),
                fmt_shape(x.shape())
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Argument(format!("kernel width must be odd, got {k}")));
        }
        if bias.shape() != [dout] {
            return Err(Error::dim(format!(
                "conv bias {} does not match {} output channels",
                fmt_shape(bias.shape()),
                dout
            )));
        }
        let xi = self.operand(x)?;
        let ki = self.operand(kernel)?;
        let bi = self.operand(bias)?;
        let xv = Arc::clone(&self.nodes[xi].data);
        let kv = Arc::clone(&self.nodes[ki].data);
        let bv = Arc::clone(&self.nodes[bi].data);
        let c = k / 2;
        let mut out = vec![0.0; t * n * dout];
        for tt in 0..t {
            for j in 0..k {
                let s = tt + j;
                if s < c || s - c >= t {
                    continue;
                }
                let s = s - c;
                for nn in 0..n {
                    let xrow = &xv[(s * n + nn) * din..(s * n + nn + 1) * din];
                    let orow = &mut out[(tt * n + nn) * dout..(tt * n + nn + 1) * dout];
                    for o in 0..dout {
                        let krow = &kv[(o * din) * k..];
                        let mut acc = 0.0;
                        for i in 0..din {
                            acc += krow[i * k + j] * xrow[i];
                        }
                        orow[o] += acc;
                    }
                }
            }
        }
        for tt in 0..t {
            for nn in 0..n {
                let orow = &mut out[(tt * n + nn) * dout..(tt * n + nn + 1) * dout];
                for (o, b) in orow.iter_mut().zip(bv.iter()) {
                    *o += b;
                }
            }
        }
        let needs = self.needs(xi) || self.needs(ki) || self.needs(bi);
        Ok(self.push_op(
            vec![t, n, dout],
            out,
            needs,
            Op::TemporalConv { x: xi, kernel: ki, bias: bi, t, n, din, dout, k },
        ))
    }

    /// Root-mean-square normalization over the trailing axis, with a
    /// learnable gain: `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_live()?;
        if x.shape().is_empty() {
            return Err(Error::dim("rms_norm input must have at least one axis"));
        }
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] {
            return Err(Error::dim(format!(
                "gain {} does not match trailing extent of {}",
                fmt_shape(gain.shape()),
                fmt_shape(x.shape())
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Argument(format!("rms_norm eps must be positive, got {eps}")));
        }
        let rows = x.numel() / d;
        let xi = self.operand(x)?;
        let gi = self.operand(gain)?;
        let (xv, gv) = (&self.nodes[xi].data, &self.nodes[gi].data);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let xrow = &xv[r * d..(r + 1) * d];
            let m: f64 = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (m + eps).sqrt();
            for i in 0..d {
                out[r * d + i] = gv[i] * xrow[i] * inv;
            }
        }
        let needs = self.needs(xi) || self.needs(gi);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, needs, Op::RmsNorm { x: xi, gain: gi, rows, d, eps }))
    }

    /// Applies a different affine map to every node of `x[t x n x din]`, with
    /// weights `w[n x q x din]`: `out[t, n, :] = w[n] . x[t, n, :]`.
    pub fn per_node_linear(&mut self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.check_live()?;
        let (t, n, din) = as_3d(x)?;
        let (wn, q, wdin) = as_3d(w)?;
        if wn != n || wdin != din {
            return Err(Error::dim(format!(
                "per-node weights {} do not match input {}",
                fmt_shape(w.shape()),
                fmt_shape(x.shape())
            )));
        }
        let xi = self.operand(x)?;
        let wi = self.operand(w)?;
        let (xv, wv) = (&self.nodes[xi].data, &self.nodes[wi].data);
        let mut out = vec![0.0; t * n * q];
        for tt in 0..t {
            for nn in 0..n {
                let xrow = &xv[(tt * n + nn) * din..(tt * n + nn + 1) * din];
                let orow = &mut out[(tt * n + nn) * q..(tt * n + nn + 1) * q];
                for (qq, o) in orow.iter_mut().enumerate() {
                    let wrow = &wv[(nn * q + qq) * din..(nn * q + qq + 1) * din];
                    let mut s = 0.0;
                    for i in 0..din {
                        s += wrow[i] * xrow[i];
                    }
                    *o = s;
                }
            }
        }
        let needs = self.needs(xi) || self.needs(wi);
        Ok(self.push_op(
            vec![t, n, q],
            out,
            needs,
            Op::PerNodeLinear { x: xi, w: wi, t, n, din, q },
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Backpropagates from a one-element loss and returns gradients for every
    /// trainable parameter bound to this tape that influenced it. The tape is
    /// consumed: any further operation (or a second backward) is an error.
    pub fn backward(&mut self, loss: &Tensor) -> Result<GradientMap> {
        self.check_live()?;
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".to_string()));
        }
        let root = match loss.node_ref() {
            Some(r) if r.tape == self.id => r.node,
            Some(_) => {
                return Err(Error::State("loss belongs to a different tape".to_string()))
            }
            None => return Err(Error::State("loss was not recorded on this tape".to_string())),
        };
        if loss.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a one-element loss, got shape {}",
                fmt_shape(loss.shape())
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for idx in (0..=root).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut map = GradientMap::default();
        for (&pid, &idx) in &self.bindings {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Some(g) = grads[idx].take() {
                let shape = self.nodes[idx].shape.clone();
                map.insert(pid, Tensor::new(shape, g).expect("gradient matches node shape"));
            }
        }
        Ok(map)
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], tgt: usize, len: usize) -> &'a mut Vec<f64> {
            grads[tgt].get_or_insert_with(|| vec![0.0; len])
        }
        let data = |i: usize| -> &Arc<Vec<f64>> { &self.nodes[i].data };
        let len = |i: usize| -> usize { self.nodes[i].data.len() };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bv = Arc::clone(data(*b));
                    let da = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += grow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(data(*a));
                    let db = acc(grads, *b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av_ip = av[i * k + p];
                            if av_ip == 0.0 {
                                continue;
                            }
                            let drow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                drow[j] += av_ip * grow[j];
                            }
                        }
                    }
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    let bv = Arc::clone(data(*b));
                    let da = acc(grads, *a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut da[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = grow[j];
                            if gij == 0.0 {
                                continue;
                            }
                            let brow = &bv[j * k..(j + 1) * k];
                            for p in 0..k {
                                drow[p] += gij * brow[p];
                            }
                        }
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(data(*a));
                    let db = acc(grads, *b, n * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gij = grow[j];
                            if gij == 0.0 {
                                continue;
                            }
                            let drow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                drow[p] += gij * arow[p];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, len(*a));
                    for (d, gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let blen = len(*b);
                    let db = acc(grads, *b, blen);
                    if blen == 1 {
                        db[0] += g.iter().sum::<f64>();
                    } else {
                        for (d, gv) in db.iter_mut().zip(g.iter()) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, len(*a));
                    for (d, gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
                if self.needs(*b) {
                    let blen = len(*b);
                    let db = acc(grads, *b, blen);
                    if blen == 1 {
                        db[0] -= g.iter().sum::<f64>();
                    } else {
                        for (d, gv) in db.iter_mut().zip(g.iter()) {
                            *d -= gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let scalar_b = len(*b) == 1;
                if self.needs(*a) {
                    let bv = Arc::clone(data(*b));
                    let da = acc(grads, *a, len(*a));
                    if scalar_b {
                        for (d, gv) in da.iter_mut().zip(g.iter()) {
                            *d += gv * bv[0];
                        }
                    } else {
                        for ((d, gv), bvv) in da.iter_mut().zip(g.iter()).zip(bv.iter()) {
                            *d += gv * bvv;
                        }
                    }
                }
                if self.needs(*b) {
                    let av = Arc::clone(data(*a));
                    let db = acc(grads, *b, len(*b));
                    if scalar_b {
                        db[0] += g.iter().zip(av.iter()).map(|(gv, avv)| gv * avv).sum::<f64>();
                    } else {
                        for ((d, gv), avv) in db.iter_mut().zip(g.iter()).zip(av.iter()) {
                            *d += gv * avv;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, len(*a));
                    for (d, gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv * c;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                if self.needs(*a) {
                    let xv = Arc::clone(data(*a));
                    let slope = *slope;
                    let da = acc(grads, *a, len(*a));
                    for ((d, gv), xvv) in da.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        *d += gv * if *xvv > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Relu { a } => {
                if self.needs(*a) {
                    let xv = Arc::clone(data(*a));
                    let da = acc(grads, *a, len(*a));
                    for ((d, gv), xvv) in da.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if *xvv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { a } => {
                if self.needs(*a) {
                    let yv = Arc::clone(&self.nodes[idx].data);
                    let da = acc(grads, *a, len(*a));
                    for ((d, gv), y) in da.iter_mut().zip(g.iter()).zip(yv.iter()) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Abs { a } => {
                if self.needs(*a) {
                    let xv = Arc::clone(data(*a));
                    let da = acc(grads, *a, len(*a));
                    for ((d, gv), xvv) in da.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        *d += gv * if *xvv > 0.0 { 1.0 } else if *xvv < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.needs(*a) {
                    let xv = Arc::clone(data(*a));
                    let (lo, hi) = (*lo, *hi);
                    let da = acc(grads, *a, len(*a));
                    for ((d, gv), xvv) in da.iter_mut().zip(g.iter()).zip(xv.iter()) {
                        if *xvv > lo && *xvv < hi {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatLast { a, b, rows, da: wa, db: wb } => {
                let (rows, wa, wb) = (*rows, *wa, *wb);
                let w = wa + wb;
                if self.needs(*a) {
                    let da = acc(grads, *a, rows * wa);
                    for r in 0..rows {
                        for i in 0..wa {
                            da[r * wa + i] += g[r * w + i];
                        }
                    }
                }
                if self.needs(*b) {
                    let db = acc(grads, *b, rows * wb);
                    for r in 0..rows {
                        for i in 0..wb {
                            db[r * wb + i] += g[r * w + wa + i];
                        }
                    }
                }
            }
            Op::MeanStack { xs } => {
                let inv = 1.0 / xs.len() as f64;
                for &x in xs {
                    if !self.needs(x) {
                        continue;
                    }
                    let dx = acc(grads, x, len(x));
                    for (d, gv) in dx.iter_mut().zip(g.iter()) {
                        *d += gv * inv;
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = len(*a);
                    let gv = g[0] / n as f64;
                    let da = acc(grads, *a, n);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, len(*a));
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::L2Norm { a } => {
                if self.needs(*a) {
                    let xv = Arc::clone(data(*a));
                    let norm = self.nodes[idx].data[0].max(1e-300);
                    let scale = g[0] / norm;
                    let da = acc(grads, *a, len(*a));
                    for (d, xvv) in da.iter_mut().zip(xv.iter()) {
                        *d += scale * xvv;
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let da = acc(grads, *a, len(*a));
                    for (d, gv) in da.iter_mut().zip(g.iter()) {
                        *d += gv;
                    }
                }
            }
            Op::Swap01 { a, d0, d1, rest } => {
                if self.needs(*a) {
                    let (d0, d1, rest) = (*d0, *d1, *rest);
                    let da = acc(grads, *a, d0 * d1 * rest);
                    for i in 0..d0 {
                        for j in 0..d1 {
                            let src = (j * d0 + i) * rest;
                            let dst = (i * d1 + j) * rest;
                            for r in 0..rest {
                                da[dst + r] += g[src + r];
                            }
                        }
                    }
                }
            }
            Op::AddBias { a, bias, rows, d } => {
                let (rows, d) = (*rows, *d);
                if self.needs(*a) {
                    let da = acc(grads, *a, rows * d);
                    for (dv, gv) in da.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
                if self.needs(*bias) {
                    let db = acc(grads, *bias, d);
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::TemporalConv { x, kernel, bias, t, n, din, dout, k } => {
                let (t, n, din, dout, k) = (*t, *n, *din, *dout, *k);
                let c = k / 2;
                let xv = Arc::clone(data(*x));
                let kv = Arc::clone(data(*kernel));
                let need_x = self.needs(*x);
                let need_k = self.needs(*kernel);
                if need_x || need_k {
                    // Accumulate both in one sweep over (t, tap, node).
                    let mut dx = vec![0.0; t * n * din];
                    let mut dk = vec![0.0; dout * din * k];
                    for tt in 0..t {
                        for j in 0..k {
                            let s = tt + j;
                            if s < c || s - c >= t {
                                continue;
                            }
                            let s = s - c;
                            for nn in 0..n {
                                let grow = &g[(tt * n + nn) * dout..(tt * n + nn + 1) * dout];
                                let xrow = &xv[(s * n + nn) * din..(s * n + nn + 1) * din];
                                let dxrow = &mut dx[(s * n + nn) * din..(s * n + nn + 1) * din];
                                for o in 0..dout {
                                    let go = grow[o];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for i in 0..din {
                                        dxrow[i] += go * kv[(o * din + i) * k + j];
                                        dk[(o * din + i) * k + j] += go * xrow[i];
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        let da = acc(grads, *x, t * n * din);
                        for (d, v) in da.iter_mut().zip(dx.iter()) {
                            *d += v;
                        }
                    }
                    if need_k {
                        let da = acc(grads, *kernel, dout * din * k);
                        for (d, v) in da.iter_mut().zip(dk.iter()) {
                            *d += v;
                        }
                    }
                }
                if self.needs(*bias) {
                    let db = acc(grads, *bias, dout);
                    for row in 0..t * n {
                        for o in 0..dout {
                            db[o] += g[row * dout + o];
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, rows, d, eps } => {
                let (rows, d, eps) = (*rows, *d, *eps);
                let xv = Arc::clone(data(*x));
                let gv = Arc::clone(data(*gain));
                if self.needs(*x) {
                    let dx = acc(grads, *x, rows * d);
                    for r in 0..rows {
                        let xrow = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let m: f64 = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (m + eps).sqrt();
                        let inv3 = inv * inv * inv;
                        let dot: f64 = (0..d).map(|i| grow[i] * gv[i] * xrow[i]).sum();
                        let coef = inv3 * dot / d as f64;
                        let drow = &mut dx[r * d..(r + 1) * d];
                        for i in 0..d {
                            drow[i] += inv * gv[i] * grow[i] - coef * xrow[i];
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = acc(grads, *gain, d);
                    for r in 0..rows {
                        let xrow = &xv[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let m: f64 = xrow.iter().map(|v| v * v).sum::<f64>() / d as f64;
                        let inv = 1.0 / (m + eps).sqrt();
                        for i in 0..d {
                            dg[i] += grow[i] * xrow[i] * inv;
                        }
                    }
                }
            }
            Op::PerNodeLinear { x, w, t, n, din, q } => {
                let (t, n, din, q) = (*t, *n, *din, *q);
                let xv = Arc::clone(data(*x));
                let wv = Arc::clone(data(*w));
                if self.needs(*x) {
                    let dx = acc(grads, *x, t * n * din);
                    for tt in 0..t {
                        for nn in 0..n {
                            let grow = &g[(tt * n + nn) * q..(tt * n + nn + 1) * q];
                            let drow = &mut dx[(tt * n + nn) * din..(tt * n + nn + 1) * din];
                            for (qq, gq) in grow.iter().enumerate() {
                                if *gq == 0.0 {
                                    continue;
                                }
                                let wrow = &wv[(nn * q + qq) * din..(nn * q + qq + 1) * din];
                                for i in 0..din {
                                    drow[i] += gq * wrow[i];
                                }
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let dw = acc(grads, *w, n * q * din);
                    for tt in 0..t {
                        for nn in 0..n {
                            let grow = &g[(tt * n + nn) * q..(tt * n + nn + 1) * q];
                            let xrow = &xv[(tt * n + nn) * din..(tt * n + nn + 1) * din];
                            for (qq, gq) in grow.iter().enumerate() {
                                if *gq == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[(nn * q + qq) * din..(nn * q + qq + 1) * din];
                                for i in 0..din {
                                    drow[i] += gq * xrow[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn as_2d(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::dim(format!(
            "expected a 2-d tensor, got {}",
            fmt_shape(t.shape())
        ))),
    }
}

fn as_3d(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::dim(format!(
            "expected a 3-d tensor, got {}",
            fmt_shape(t.shape())
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(values: [f64; 4]) -> Tensor {
        Tensor::new(vec![2, 2], values.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::new();
        let a = t2([1.0, 2.0, 3.0, 4.0]);
        let b = t2([5.0, 6.0, 7.0, 8.0]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.values(), &[19.0, 22.0, 43.0, 50.0]);

        // matmul_nt(a, b) multiplies by the transpose of `b`.
        let y2 = tape.matmul_nt(&a, &b).unwrap();
        assert_eq!(y2.values(), &[17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_formulas() {
        // loss = sum(A B): dA = 1 B^T rowwise, dB = A^T 1.
        let pa = Param::new("a", t2([1.0, 2.0, 3.0, 4.0]));
        let pb = Param::new("b", t2([5.0, 6.0, 7.0, 8.0]));
        let mut tape = Tape::new();
        let a = tape.param(&pa);
        let b = tape.param(&pb);
        let y = tape.matmul(&a, &b).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&pa).unwrap().values(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(&pb).unwrap().values(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn reusing_a_parameter_accumulates_its_gradient() {
        let p = Param::new("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let x_again = tape.param(&p); // same node, not a copy
        let y = tape.mul(&x, &x_again).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        // d(x*x)/dx = 2x = 6, reached through two paths.
        assert_eq!(grads.get(&p).unwrap().values(), &[6.0]);
    }

    #[test]
    fn binding_a_parameter_twice_reuses_the_node() {
        let p = Param::new("x", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let _ = tape.param(&p);
        let n = tape.len();
        let _ = tape.param(&p);
        assert_eq!(tape.len(), n);
    }

    #[test]
    fn backward_consumes_the_tape() {
        let p = Param::new("x", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let x = tape.param(&p);
        let loss = tape.sum_all(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::State(_))));
        assert!(matches!(tape.sum_all(&x), Err(Error::State(_))));
    }

    #[test]
    fn backward_requires_a_scalar_from_this_tape() {
        let p = Param::new("x", t2([1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let x = tape.param(&p);
        assert!(matches!(tape.backward(&x), Err(Error::Argument(_))));

        let mut other = Tape::new();
        let q = Param::new("y", Tensor::scalar(1.0));
        let y = other.param(&q);
        let loss = other.sum_all(&y).unwrap();
        assert!(matches!(tape.backward(&loss), Err(Error::State(_))));
    }

    #[test]
    fn operands_from_another_tape_are_rejected() {
        let p = Param::new("x", Tensor::scalar(1.0));
        let mut a = Tape::new();
        let xa = a.param(&p);
        let mut b = Tape::new();
        assert!(matches!(b.sum_all(&xa), Err(Error::State(_))));
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut p = Param::new("w", Tensor::scalar(2.0));
        p.set_frozen(true);
        let q = Param::new("v", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.param(&p);
        let v = tape.param(&q);
        let y = tape.mul(&w, &v).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&p).is_none());
        assert_eq!(grads.get(&q).unwrap().values(), &[2.0]);
    }

    #[test]
    fn elementwise_derivatives_at_hand_points() {
        let p = Param::new("x", Tensor::new(vec![4], vec![-2.0, -0.5, 0.5, 2.0]).unwrap());

        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.leaky_relu(&x, 0.01).unwrap();
        assert_eq!(y.values(), &[-0.02, -0.005, 0.5, 2.0]);
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&p).unwrap().values(), &[0.01, 0.01, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.abs(&x).unwrap();
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&p).unwrap().values(), &[-1.0, -1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.param(&p);
        let y = tape.clamp(&x, -1.0, 1.0).unwrap();
        assert_eq!(y.values(), &[-1.0, -0.5, 0.5, 1.0]);
        let loss = tape.sum_all(&y).unwrap();
        let g = tape.backward(&loss).unwrap();
        // Zero slope outside the band, unit slope inside.
        assert_eq!(g.get(&p).unwrap().values(), &[0.0, 1.0, 1.0, 0.0]);

        let zero = Param::new("z", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let x = tape.param(&zero);
        let y = tape.sigmoid(&x).unwrap();
        assert_eq!(y.values(), &[0.5]);
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&zero).unwrap().values(), &[0.25]);
    }

    #[test]
    fn concat_features_stacks_the_trailing_axis() {
        let pa = Param::new("a", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pb = Param::new("b", Tensor::new(vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&pa);
        let b = tape.param(&pb);
        let y = tape.concat_features(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert_eq!(
            y.values(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        // Each side receives exactly its slice of the upstream gradient.
        let weights = Tensor::new(vec![2, 5], (1..=10).map(f64::from).collect()).unwrap();
        let weighted = tape.mul(&y, &weights).unwrap();
        let loss = tape.sum_all(&weighted).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&pa).unwrap().values(), &[1.0, 2.0, 6.0, 7.0]);
        assert_eq!(g.get(&pb).unwrap().values(), &[3.0, 4.0, 5.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn reduce_mean_averages_and_splits_gradient() {
        let pa = Param::new("a", Tensor::new(vec![2], vec![1.0, 5.0]).unwrap());
        let pb = Param::new("b", Tensor::new(vec![2], vec![3.0, 7.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&pa);
        let b = tape.param(&pb);
        let m = tape.reduce_mean(&[a, b]).unwrap();
        assert_eq!(m.values(), &[2.0, 6.0]);
        let loss = tape.sum_all(&m).unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&pa).unwrap().values(), &[0.5, 0.5]);
        assert_eq!(g.get(&pb).unwrap().values(), &[0.5, 0.5]);
    }

    #[test]
    fn shape_ops_preserve_layout() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut tape = Tape::new();
        let s = tape.swap01(&x).unwrap();
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = tape.reshape(&x, vec![3, 2]).unwrap();
        assert_eq!(r.values(), x.values());

        let bias = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = tape.add_bias(&x, &bias).unwrap();
        assert_eq!(y.values(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn temporal_conv_pads_with_zeros() {
        // Width-3 kernel [10, 100, 1000] over the stream [1, 2, 3].
        let x = Tensor::new(vec![3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 3], vec![10.0, 100.0, 1000.0]).unwrap();
        let b = Tensor::new(vec![1], vec![0.5]).unwrap();
        let mut tape = Tape::new();
        let y = tape.temporal_conv(&x, &k, &b).unwrap();
        assert_eq!(y.shape(), &[3, 1, 1]);
        assert_eq!(y.values(), &[2100.5, 3210.5, 320.5]);

        let even = Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert!(tape.temporal_conv(&x, &even, &b).is_err());
    }

    #[test]
    fn per_node_linear_uses_each_nodes_own_map() {
        // Node 0 doubles, node 1 sums coordinates.
        let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(
            vec![2, 1, 2],
            vec![2.0, 0.0, /* node 0 */ 1.0, 1.0 /* node 1 */],
        )
        .unwrap();
        let mut tape = Tape::new();
        let y = tape.per_node_linear(&x, &w).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1]);
        assert_eq!(y.values(), &[2.0, 7.0]);
    }

    #[test]
    fn norms_and_means_match_hand_values() {
        let x = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let n = tape.l2_norm(&x).unwrap();
        assert_eq!(n.values(), &[5.0]);
        let m = tape.mean_all(&x).unwrap();
        assert_eq!(m.values(), &[3.5]);

        let g = Tensor::new(vec![4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let ones = Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let y = tape.rms_norm(&ones, &g, 1e-12).unwrap();
        for v in y.values() {
            assert!((v - 2.0).abs() < 1e-9, "rms over unit rows should be 1, got {v}");
        }
    }
}
