//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the tape in exact reverse order and accumulates adjoints into
//! per-node gradient slots. The tape is rebuilt for every forward pass.
//!
//! Broadcasting is limited to [`Tape::add_bias`], which adds a tensor over the
//! leading axes of another. Every other shape disagreement is an error.

use thiserror::Error;

/// Score assigned to masked attention entries.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("backward already ran on this tape; rebuild the graph or call zero_grad first")]
    AlreadyBackpropagated,
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::InvalidTensor(format!(
                "shape {shape:?} needs {numel} entries, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(AutodiffError::ShapeMismatch { op: "reshape", lhs: self.shape, rhs: shape });
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate defects for exercising the gradient checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    GeluBackwardSignFlip,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    MulScalar(Var, f64),
    Transpose(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Gelu(Var),
    MseLoss { pred: Var, target: Var, batch: usize },
    Sum(Var),
    Reshape(Var),
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Narrow(Var),
    CausalMask(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::MulScalar(..) => "mul_scalar",
            Op::Transpose(..) => "transpose",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(..) => "softmax",
            Op::Gelu(..) => "gelu",
            Op::MseLoss { .. } => "mse_loss",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Narrow(..) => "narrow",
            Op::CausalMask(..) => "causal_mask",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph with gradient slots.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    check_finite: bool,
    fault: Option<Fault>,
}

/// `C (m×n) (+)= op(A) (m×k) · op(B) (k×n)`; `a_t`/`b_t` mean the slice holds
/// the transpose in row-major order.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU `x Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * gelu_cdf(x)
}

pub fn gelu_derivative(x: f64) -> f64 {
    gelu_cdf(x) + x * gelu_pdf(x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, contribution: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    contribution(g);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fail any op that produces NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(AutodiffError::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Accumulated gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor { shape: self.nodes[v.0].value.shape.clone(), data: g.clone() })
    }

    /// Gradient or zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Clears every gradient slot and re-arms `backward`.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    /// Matrix product over the last two axes. `b` is either a 2-D weight shared
    /// across all leading axes of `a`, or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = &self.nodes[a.0].value.data;
            let bv = &self.nodes[b.0].value.data;
            if shared_rhs {
                gemm(batch * m, k, n, av, false, bv, false, &mut out, false);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
        }
        self.push(Tensor { shape, data: out }, Op::MatMul { a, b, shared_rhs })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor { shape, data }, Op::Mul(a, b))
    }

    /// Adds `bias` to every trailing block of `x` whose shape equals `bias`'s.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sb = self.shape(bias);
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(self.mismatch("add_bias", x, bias));
        }
        let block = self.value(bias).numel();
        let bv = &self.value(bias).data;
        let data = self
            .value(x)
            .data
            .chunks(block.max(1))
            .flat_map(|c| c.iter().zip(bv).map(|(a, b)| a + b))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::AddBias { x, bias })
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::MulScalar(x, c))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(AutodiffError::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        let (data, shape) = transpose_last2(&self.value(x).data, &s);
        self.push(Tensor { shape, data }, Op::Transpose(x))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [d] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        if !(eps > 0.0) {
            return Err(AutodiffError::InvalidTensor(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xv = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last_axis(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(AutodiffError::InvalidTensor("softmax over an empty axis".into()));
        }
        let mut out = self.value(x).data.clone();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data: out }, Op::Softmax(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor { shape, data }, Op::Gelu(x))
    }

    /// Squared error summed over every axis but the first, averaged over the
    /// first (batch) axis. One-dimensional inputs count as a single sample.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.mismatch("mse_loss", pred, target));
        }
        let s = self.shape(pred);
        let batch = if s.len() >= 2 { s[0].max(1) } else { 1 };
        let total: f64 = self
            .value(pred)
            .data
            .iter()
            .zip(&self.value(target).data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Tensor::scalar(total / batch as f64), Op::MseLoss { pred, target, batch })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(x))
    }

    /// `[B, T, D] → [B, H, T, D/H]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(AutodiffError::ShapeMismatch { op: "split_heads", lhs: s, rhs: vec![heads] });
        }
        let (b, t, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        self.push(Tensor { shape: vec![b, heads, t, dh], data: out }, Op::SplitHeads { x, heads })
    }

    /// `[B, H, T, E] → [B, T, H·E]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(AutodiffError::ShapeMismatch { op: "merge_heads", lhs: s, rhs: vec![] });
        }
        let (b, heads, t, dh) = (s[0], s[1], s[2], s[3]);
        let out = merge_heads_data(&self.value(x).data, b, heads, t, dh);
        self.push(Tensor { shape: vec![b, t, heads * dh], data: out }, Op::MergeHeads { x, heads })
    }

    /// First `rows` rows of a 2-D tensor.
    pub fn narrow(&mut self, x: Var, rows: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || rows > s[0] {
            return Err(AutodiffError::ShapeMismatch { op: "narrow", lhs: s, rhs: vec![rows] });
        }
        let data = self.value(x).data[..rows * s[1]].to_vec();
        self.push(Tensor { shape: vec![rows, s[1]], data }, Op::Narrow(x))
    }

    /// Replaces entries above the diagonal of the last two (square) axes with
    /// [`MASKED_SCORE`].
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(AutodiffError::ShapeMismatch { op: "causal_mask", lhs: s, rhs: vec![] });
        }
        let t = s[s.len() - 1];
        let mut data = self.value(x).data.clone();
        for block in data.chunks_mut(t * t) {
            for i in 0..t {
                for j in i + 1..t {
                    block[i * t + j] = MASKED_SCORE;
                }
            }
        }
        self.push(Tensor { shape: s, data }, Op::CausalMask(x))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NotScalar(self.shape(output).to_vec()));
        }
        self.backward_done = true;
        accumulate(&mut self.grads[output.0], 1, |g| g[0] += 1.0);
        for id in (0..=output.0).rev() {
            let Some(gy) = self.grads[id].take() else { continue };
            self.propagate(id, &gy);
            self.grads[id] = Some(gy);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, gy: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[id];
        let numel = |v: Var| nodes[v.0].value.data.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_rhs } => {
                let sa = &nodes[a.0].value.shape;
                let sb = &nodes[b.0].value.shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                if *shared_rhs {
                    accumulate(&mut grads[a.0], numel(*a), |ga| gemm(batch * m, n, k, gy, false, bv, true, ga, true));
                    accumulate(&mut grads[b.0], numel(*b), |gb| gemm(k, batch * m, n, av, true, gy, false, gb, true));
                } else {
                    accumulate(&mut grads[a.0], numel(*a), |ga| {
                        for i in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &gy[i * m * n..(i + 1) * m * n],
                                false,
                                &bv[i * k * n..(i + 1) * k * n],
                                true,
                                &mut ga[i * m * k..(i + 1) * m * k],
                                true,
                            );
                        }
                    });
                    accumulate(&mut grads[b.0], numel(*b), |gb| {
                        for i in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..(i + 1) * m * k],
                                true,
                                &gy[i * m * n..(i + 1) * m * n],
                                false,
                                &mut gb[i * k * n..(i + 1) * k * n],
                                true,
                            );
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    accumulate(&mut grads[v.0], gy.len(), |g| g.iter_mut().zip(gy).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                accumulate(&mut grads[a.0], gy.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * bv[i];
                    }
                });
                accumulate(&mut grads[b.0], gy.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * av[i];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                accumulate(&mut grads[x.0], gy.len(), |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b));
                let block = numel(*bias);
                accumulate(&mut grads[bias.0], block, |g| {
                    for chunk in gy.chunks(block.max(1)) {
                        g.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MulScalar(x, c) => {
                accumulate(&mut grads[x.0], gy.len(), |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += c * b));
            }
            Op::Transpose(x) => {
                let (gt, _) = transpose_last2(gy, &node.value.shape);
                accumulate(&mut grads[x.0], gy.len(), |g| g.iter_mut().zip(&gt).for_each(|(a, b)| *a += b));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = node.value.last_dim();
                let gv = &nodes[gain.0].value.data;
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dx = vec![0.0; gy.len()];
                let mut dxhat = vec![0.0; d];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gyr = &gy[r * d..(r + 1) * d];
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        dgain[j] += gyr[j] * h[j];
                        dbias[j] += gyr[j];
                        dxhat[j] = gyr[j] * gv[j];
                        sum_dh += dxhat[j];
                        sum_dh_h += dxhat[j] * h[j];
                    }
                    let dn = d as f64;
                    for j in 0..d {
                        dx[r * d + j] = inv / dn * (dn * dxhat[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
                accumulate(&mut grads[x.0], dx.len(), |g| g.iter_mut().zip(&dx).for_each(|(a, b)| *a += b));
                accumulate(&mut grads[gain.0], d, |g| g.iter_mut().zip(&dgain).for_each(|(a, b)| *a += b));
                accumulate(&mut grads[bias.0], d, |g| g.iter_mut().zip(&dbias).for_each(|(a, b)| *a += b));
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let y = &node.value.data;
                accumulate(&mut grads[x.0], gy.len(), |g| {
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gy[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            g[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value.data;
                let sign = if self.fault == Some(Fault::GeluBackwardSignFlip) { -1.0 } else { 1.0 };
                accumulate(&mut grads[x.0], gy.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += sign * gy[i] * gelu_derivative(xv[i]);
                    }
                });
            }
            Op::MseLoss { pred, target, batch } => {
                let pv = &nodes[pred.0].value.data;
                let tv = &nodes[target.0].value.data;
                let scale = 2.0 * gy[0] / *batch as f64;
                accumulate(&mut grads[pred.0], pv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] += scale * (pv[i] - tv[i]);
                    }
                });
                accumulate(&mut grads[target.0], pv.len(), |g| {
                    for i in 0..g.len() {
                        g[i] -= scale * (pv[i] - tv[i]);
                    }
                });
            }
            Op::Sum(x) => {
                accumulate(&mut grads[x.0], numel(*x), |g| g.iter_mut().for_each(|a| *a += gy[0]));
            }
            Op::Reshape(x) | Op::Narrow(x) => {
                accumulate(&mut grads[x.0], numel(*x), |g| g.iter_mut().zip(gy).for_each(|(a, b)| *a += b));
            }
            Op::SplitHeads { x, heads } => {
                let s = &node.value.shape;
                let back = merge_heads_data(gy, s[0], *heads, s[2], s[3]);
                accumulate(&mut grads[x.0], gy.len(), |g| g.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::MergeHeads { x, heads } => {
                let s = &node.value.shape;
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                accumulate(&mut grads[x.0], gy.len(), |g| {
                    for bi in 0..b {
                        for ti in 0..t {
                            for h in 0..*heads {
                                let src = (bi * t + ti) * d + h * dh;
                                let dst = ((bi * heads + h) * t + ti) * dh;
                                for e in 0..dh {
                                    g[dst + e] += gy[src + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::CausalMask(x) => {
                let t = node.value.last_dim();
                accumulate(&mut grads[x.0], gy.len(), |g| {
                    for (bi, block) in gy.chunks(t * t).enumerate() {
                        for i in 0..t {
                            for j in 0..=i {
                                g[bi * t * t + i * t + j] += block[i * t + j];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let r = shape[shape.len() - 2];
    let c = shape[shape.len() - 1];
    let mut out = vec![0.0; data.len()];
    for (bi, block) in data.chunks(r * c).enumerate() {
        let o = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                o[j * r + i] = block[i * c + j];
            }
        }
    }
    let mut s = shape.to_vec();
    let len = s.len();
    s.swap(len - 1, len - 2);
    (out, s)
}

fn merge_heads_data(x: &[f64], b: usize, heads: usize, t: usize, dh: usize) -> Vec<f64> {
    let d = heads * dh;
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let src = ((bi * heads + h) * t + ti) * dh;
                let dst = (bi * t + ti) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

/// Finite-difference step used by [`gradcheck`].
pub const GRADCHECK_STEP: f64 = 1e-6;

/// Compares the tape gradient of the scalar function `f` at `x` against
/// central differences. Returns the maximum over coordinates of
/// `|g_ad − g_fd| / (|g_ad| + |g_fd| + 1e−8)`.
pub fn gradcheck<F>(f: F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradcheck_with_fault(f, x, None)
}

#[doc(hidden)]
pub fn gradcheck_with_fault<F>(f: F, x: &Tensor, fault: Option<Fault>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.inject_fault(fault);
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    tape.backward(out)?;
    let analytic = tape.grad_or_zeros(xv);
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t);
        let out = f(&mut tape, v)?;
        let val = tape.value(out);
        if val.numel() != 1 {
            return Err(AutodiffError::NotScalar(val.shape().to_vec()));
        }
        Ok(val.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data[i] += GRADCHECK_STEP;
        let mut minus = x.clone();
        minus.data[i] -= GRADCHECK_STEP;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * GRADCHECK_STEP);
        let ad = analytic.data[i];
        worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs() + 1e-8));
    }
    Ok(worst)
}
