//! Dense `f64` tensors with a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every forward op in execution order. [`Graph::backward`]
//! walks that tape once in reverse, so each node is visited exactly once and
//! a tensor consumed by several ops accumulates all of its contributions.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not describe {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: expected a rank-2 tensor, got shape {shape:?}")]
    NotMatrix { op: &'static str, shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: argument out of range")]
    OutOfRange { op: &'static str },
}

pub type Result<T, E = TensorError> = core::result::Result<T, E>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major dense tensor. A rank-0 tensor holds one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::NotMatrix {
                op: "dims2",
                shape: self.shape.clone(),
            }),
        }
    }

    /// Row `i` of a matrix.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Keeps only the listed rows of a matrix, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let (n, cols) = self.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(TensorError::OutOfRange { op: "select_rows" });
            }
            data.extend_from_slice(self.row(r));
        }
        Self::matrix(rows.len(), cols, data)
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    Sum(Var),
    FocalLogits {
        logits: Var,
        targets: Vec<f64>,
        mask: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Split of a shape around `axis` into (outer, extent, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

// C[m×n] = A[m×k] · B[k×n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// C[m×n] = A[m×k] · B[n×k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

// C[k×n] = A[m×k]ᵀ · B[m×n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: &[f64]) {
    if !nodes[v.0].value.requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib.to_vec()),
    }
}

/// Focal term for one logit and its derivative w.r.t. that logit.
///
/// With `z = x` for positives and `z = -x` for negatives, `s = σ(-z) = 1 - p_t`:
/// term = α_t · s^γ · softplus(-z), d term / dz = -α_t · s^γ · (γ(1-s)·softplus(-z) + s).
fn focal_term(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let (z, sign, alpha_t) = if positive {
        (x, 1.0, alpha)
    } else {
        (-x, -1.0, 1.0 - alpha)
    };
    let s = math::sigmoid(-z);
    let sp = math::softplus(-z);
    let mod_factor = if gamma == 0.0 { 1.0 } else { math::powf(s, gamma) };
    let term = alpha_t * mod_factor * sp;
    let dz = -alpha_t * mod_factor * (gamma * (1.0 - s) * sp + s);
    (term, dz * sign)
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        self.push("leaf", tensor, Op::Leaf, false)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<Var> {
        tensor.requires_grad = false;
        tensor.grad = None;
        self.push("constant", tensor, Op::Leaf, false)
    }

    fn push(&mut self, name: &'static str, mut value: Tensor, op: Op, requires: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        value.requires_grad |= requires;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(TensorError::NotMatrix { op, shape: s.to_vec() }),
        }
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = mm(&self.value(a).data, &self.value(b).data, m, k, n);
        let req = self.needs(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, data)?, Op::MatMul(a, b), req)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_nt", a)?;
        let (n, k2) = self.matrix_dims("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let data = mm_nt(&self.value(a).data, &self.value(b).data, m, k, n);
        let req = self.needs(&[a, b]);
        self.push("matmul_nt", Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), req)
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(&self.value(a).shape.clone(), data)?;
        let req = self.needs(&[a, b]);
        self.push(name, t, op, req)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("hadamard", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_len(&self, name: &'static str, x: Var, row: Var) -> Result<usize> {
        let d = *self.shape(x).last().unwrap_or(&1);
        let r = self.value(row).numel();
        let rs = self.shape(row);
        let row_ok = rs.last() == Some(&d) && r == d;
        if !row_ok || self.shape(x).is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: name,
                lhs: self.shape(x).to_vec(),
                rhs: rs.to_vec(),
            });
        }
        Ok(d)
    }

    /// `x + row`, broadcasting a length-`d` row over every leading index of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.row_len("add_row", x, row)?;
        let r = &self.value(row).data;
        let data = self.value(x).data.iter().enumerate().map(|(i, &v)| v + r[i % d]).collect();
        let t = Tensor::new(&self.shape(x).to_vec(), data)?;
        let req = self.needs(&[x, row]);
        self.push("add_row", t, Op::AddRow(x, row), req)
    }

    /// `x ⊙ row`, broadcasting a length-`d` row over every leading index of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.row_len("mul_row", x, row)?;
        let r = &self.value(row).data;
        let data = self.value(x).data.iter().enumerate().map(|(i, &v)| v * r[i % d]).collect();
        let t = Tensor::new(&self.shape(x).to_vec(), data)?;
        let req = self.needs(&[x, row]);
        self.push("mul_row", t, Op::MulRow(x, row), req)
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let data = self.value(x).data.iter().map(|&v| f(v)).collect();
        let t = Tensor::new(&self.shape(x).to_vec(), data)?;
        let req = self.needs(&[x]);
        self.push(name, t, op, req)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, k), |v| v * k)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, Op::Sigmoid(x), math::sigmoid)
    }

    /// Softmax along `axis`, computed after subtracting the running maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = math::exp(src[idx(i)] - max);
                    out[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[idx(i)] /= total;
                }
            }
        }
        let req = self.needs(&[x]);
        self.push("softmax", Tensor::new(&shape, out)?, Op::Softmax { x, axis }, req)
    }

    /// Per-vector normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::InvalidAxis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if self.value(p).numel() != d {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gain).data, &self.value(bias).data);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let v = &src[r * d..(r + 1) * d];
            let mean = v.iter().sum::<f64>() / d as f64;
            let var = v.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / math::sqrt(var + eps);
            inv_std[r] = is;
            for j in 0..d {
                let h = (v[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let req = self.needs(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", Tensor::new(&shape, out)?, op, req)
    }

    /// Divides by the Euclidean norm along `axis`; the norm is clamped below by 1e-12.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("l2_normalize", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = &self.value(x).data;
        let mut out = vec![0.0; src.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let sq: f64 = (0..n).map(|i| src[idx(i)] * src[idx(i)]).sum();
                let norm = math::sqrt(sq).max(L2_EPS);
                norms[o * inner + j] = norm;
                for i in 0..n {
                    out[idx(i)] = src[idx(i)] / norm;
                }
            }
        }
        let req = self.needs(&[x]);
        self.push("l2_normalize", Tensor::new(&shape, out)?, Op::L2Normalize { x, axis, norms }, req)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::OutOfRange { op: "concat" })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let block = n * inner;
                out.extend_from_slice(&self.value(p).data[o * block..(o + 1) * block]);
            }
        }
        let req = self.needs(parts);
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", Tensor::new(&shape, out)?, op, req)
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let src_shape = self.shape(x).to_vec();
        if len == 0 || start + len > src_shape[axis] {
            return Err(TensorError::OutOfRange { op: "narrow" });
        }
        let (outer, n, inner) = axis_split(&src_shape, axis);
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = src_shape;
        shape[axis] = len;
        let req = self.needs(&[x]);
        self.push("narrow", Tensor::new(&shape, out)?, Op::Narrow { x, axis, start }, req)
    }

    /// Tiles `x` `times` times along axis 0.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 || self.shape(x).is_empty() {
            return Err(TensorError::OutOfRange { op: "repeat_rows" });
        }
        let mut shape = self.shape(x).to_vec();
        shape[0] *= times;
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            out.extend_from_slice(src);
        }
        let req = self.needs(&[x]);
        self.push("repeat_rows", Tensor::new(&shape, out)?, Op::RepeatRows { x, times }, req)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data.iter().sum();
        let req = self.needs(&[x]);
        self.push("sum", Tensor::scalar(total), Op::Sum(x), req)
    }

    /// Unnormalized masked binary focal loss evaluated on logits.
    ///
    /// Returns the sum of `-α_t (1 - p_t)^γ ln p_t` over elements whose mask is
    /// nonzero, with `p = σ(logit)`. Masked elements contribute exactly zero.
    pub fn focal_loss_logits(
        &mut self,
        logits: Var,
        targets: &[f64],
        mask: &[f64],
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n || mask.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "focal_loss",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let x = &self.value(logits).data;
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] != 0.0 {
                total += focal_term(x[i], targets[i] > 0.5, alpha, gamma).0;
            }
        }
        let req = self.needs(&[logits]);
        let op = Op::FocalLogits {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            alpha,
            gamma,
        };
        self.push("focal_loss", Tensor::scalar(total), op, req)
    }

    /// Reverse pass from a scalar `loss`. Every node requiring a gradient ends up
    /// holding d loss / d node; leaves not reached by the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lv.shape.clone() });
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].value.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() && matches!(node.op, Op::Leaf) {
                node.value.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes[..];
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[1];
                if wants(*a) {
                    accumulate(grads, nodes, *a, &mm_nt(g, &val(*b).data, m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, nodes, *b, &mm_tn(&val(*a).data, g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).shape[0], val(*a).shape[1]);
                let n = val(*b).shape[0];
                if wants(*a) {
                    accumulate(grads, nodes, *a, &mm(g, &val(*b).data, m, n, k));
                }
                if wants(*b) {
                    accumulate(grads, nodes, *b, &mm_tn(g, &val(*a).data, m, n, k));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, nodes, *a, g);
                accumulate(grads, nodes, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, nodes, *a, g);
                if wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, nodes, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let d: Vec<f64> = g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect();
                    accumulate(grads, nodes, *a, &d);
                }
                if wants(*b) {
                    let d: Vec<f64> = g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect();
                    accumulate(grads, nodes, *b, &d);
                }
            }
            Op::AddRow(x, row) => {
                accumulate(grads, nodes, *x, g);
                if wants(*row) {
                    let d = val(*row).numel();
                    let mut dr = vec![0.0; d];
                    for (k, v) in g.iter().enumerate() {
                        dr[k % d] += v;
                    }
                    accumulate(grads, nodes, *row, &dr);
                }
            }
            Op::MulRow(x, row) => {
                let r = &val(*row).data;
                let d = r.len();
                if wants(*x) {
                    let dx: Vec<f64> = g.iter().enumerate().map(|(k, v)| v * r[k % d]).collect();
                    accumulate(grads, nodes, *x, &dx);
                }
                if wants(*row) {
                    let xs = &val(*x).data;
                    let mut dr = vec![0.0; d];
                    for (k, v) in g.iter().enumerate() {
                        dr[k % d] += v * xs[k];
                    }
                    accumulate(grads, nodes, *row, &dr);
                }
            }
            Op::Scale(x, k) => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(grads, nodes, *x, &d);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(&val(*x).data)
                    .map(|(v, &xi)| if xi > 0.0 { *v } else { 0.0 })
                    .collect();
                accumulate(grads, nodes, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g.iter().zip(&out.data).map(|(v, y)| v * y * (1.0 - y)).collect();
                accumulate(grads, nodes, *x, &d);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + j;
                        let dot: f64 = (0..n).map(|t| y[idx(t)] * g[idx(t)]).sum();
                        for t in 0..n {
                            d[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                accumulate(grads, nodes, *x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = &val(*gain).data;
                let d = gv.len();
                let rows = xhat.len() / d;
                if wants(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    accumulate(grads, nodes, *x, &dx);
                }
                if wants(*gain) || wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                            db[j] += g[r * d + j];
                        }
                    }
                    accumulate(grads, nodes, *gain, &dg);
                    accumulate(grads, nodes, *bias, &db);
                }
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, n, inner) = axis_split(&out.shape, *axis);
                let y = &out.data;
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |t: usize| (o * n + t) * inner + j;
                        let norm = norms[o * inner + j];
                        let clamped = norm <= L2_EPS;
                        let dot: f64 = (0..n).map(|t| y[idx(t)] * g[idx(t)]).sum();
                        for t in 0..n {
                            d[idx(t)] = if clamped {
                                g[idx(t)] / norm
                            } else {
                                (g[idx(t)] - y[idx(t)] * dot) / norm
                            };
                        }
                    }
                }
                accumulate(grads, nodes, *x, &d);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(&out.shape, *axis);
                let total_block = out.shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = val(p).shape[*axis] * inner;
                    if wants(p) {
                        let mut d = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let from = o * total_block + offset;
                            d.extend_from_slice(&g[from..from + block]);
                        }
                        accumulate(grads, nodes, p, &d);
                    }
                    offset += block;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = &val(*x).shape;
                let (outer, n, inner) = axis_split(src_shape, *axis);
                let len = out.shape[*axis];
                let mut d = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    d[to..to + len * inner].copy_from_slice(&g[from..from + len * inner]);
                }
                accumulate(grads, nodes, *x, &d);
            }
            Op::RepeatRows { x, times } => {
                let block = val(*x).numel();
                let mut d = vec![0.0; block];
                for t in 0..*times {
                    for (a, b) in d.iter_mut().zip(&g[t * block..(t + 1) * block]) {
                        *a += b;
                    }
                }
                accumulate(grads, nodes, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).numel()];
                accumulate(grads, nodes, *x, &d);
            }
            Op::FocalLogits {
                logits,
                targets,
                mask,
                alpha,
                gamma,
            } => {
                let xs = &val(*logits).data;
                let d: Vec<f64> = (0..xs.len())
                    .map(|k| {
                        if mask[k] == 0.0 {
                            0.0
                        } else {
                            g[0] * focal_term(xs[k], targets[k] > 0.5, *alpha, *gamma).1
                        }
                    })
                    .collect();
                accumulate(grads, nodes, *logits, &d);
            }
        }
    }
}

/// Lower clamp applied to vector norms before division.
pub const L2_EPS: f64 = 1e-12;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with the denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of a scalar function against central differences.
///
/// `f` rebuilds its graph from the leaf it is handed; it must be deterministic.
/// Returns the maximum elementwise relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), core::slice::from_ref(x), h)
}

/// Multi-input variant of [`finite_diff_check`]; every input is checked.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], with_grad: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars = inputs
            .iter()
            .map(|t| {
                let t = if with_grad { t.clone().requiring_grad() } else { t.clone() };
                g.leaf(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let y = f(&mut g, &vars)?;
        Ok((g, vars, y))
    };
    let (mut g, vars, y) = eval(inputs, true)?;
    g.backward(y)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for t in 0..inputs.len() {
        for k in 0..inputs[t].numel() {
            let orig = work[t].data[k];
            work[t].data[k] = orig + h;
            let (gp, _, yp) = eval(&work, false)?;
            work[t].data[k] = orig - h;
            let (gm, _, ym) = eval(&work, false)?;
            work[t].data[k] = orig;
            let numeric = (gp.value(yp).item() - gm.value(ym).item()) / (2.0 * h);
            worst = worst.max(relative_error(analytic[t][k], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..numel(shape)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g
            .constant(Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let a_t = rand_tensor(&[3, 3], 1);
        let a = g.constant(a_t.clone()).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), a_t.data());
    }

    #[test]
    fn hand_matmul() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(2, 1, vec![1., 1.]).unwrap()).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(y), &[2, 1]);
        assert_eq!(g.value(y).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_grad() {
        let err = finite_diff_check_many(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.sigmoid(y)?;
                g.sum(y)
            },
            &[rand_tensor(&[4, 5], 2), rand_tensor(&[5, 3], 3)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn matmul_nt_matches_explicit() {
        let a = rand_tensor(&[3, 4], 4);
        let b = rand_tensor(&[5, 4], 5);
        let mut g = Graph::new();
        let (va, vb) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let y = g.matmul_nt(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[j * 4 + k]).sum();
                assert!((g.value(y).data()[i * 5 + j] - expect).abs() < 1e-15);
            }
        }
        let err = finite_diff_check_many(
            |g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                let y = g.sigmoid(y)?;
                g.sum(y)
            },
            &[a, b],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![0., 0., 0.]).unwrap()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert!(close(g.value(y).data(), &[1. / 3.; 3], 1e-15));
        let x = g.constant(Tensor::new(&[2], vec![1000., 1000.]).unwrap()).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        assert!(matches!(g.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_grad() {
        let w = rand_tensor(&[6], 9);
        let err = finite_diff_check(
            |g, x| {
                let y = g.softmax(x, 0)?;
                let w = g.constant(w.clone())?;
                let y = g.hadamard(y, w)?;
                g.sum(y)
            },
            &rand_tensor(&[6], 6),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_grad_inner_axis() {
        let w = rand_tensor(&[2, 3, 4], 11);
        let err = finite_diff_check(
            |g, x| {
                let y = g.softmax(x, 1)?;
                let w = g.constant(w.clone())?;
                let y = g.hadamard(y, w)?;
                g.sum(y)
            },
            &rand_tensor(&[2, 3, 4], 10),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    fn ln_plain(x: Tensor) -> Vec<f64> {
        let d = *x.shape().last().unwrap();
        let mut g = Graph::new();
        let x = g.constant(x).unwrap();
        let gain = g.constant(Tensor::full(&[d], 1.0).unwrap()).unwrap();
        let bias = g.constant(Tensor::zeros(&[d]).unwrap()).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn layer_norm_examples() {
        assert_eq!(ln_plain(Tensor::new(&[4], vec![5.; 4]).unwrap()), vec![0.; 4]);
        let y = ln_plain(Tensor::new(&[2], vec![1., -1.]).unwrap());
        assert!(close(&y, &[1., -1.], 1e-4), "{y:?}");
    }

    #[test]
    fn layer_norm_grad() {
        let w = rand_tensor(&[3, 5], 12);
        let err = finite_diff_check_many(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                let w = g.constant(w.clone())?;
                let y = g.hadamard(y, w)?;
                g.sum(y)
            },
            &[rand_tensor(&[3, 5], 13), rand_tensor(&[5], 14), rand_tensor(&[5], 15)],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0., 0.96]).unwrap()).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        // 1 / (1 + e^-0.96) to 30 digits
        assert!((g.value(s).data()[1] - 0.723_121_805_124_389_8).abs() < 1e-15);
        let v = g.constant(Tensor::new(&[2], vec![3., 4.]).unwrap()).unwrap();
        let n = g.l2_normalize(v, 0).unwrap();
        assert!(close(g.value(n).data(), &[0.6, 0.8], 1e-15));
        let z = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let n = g.l2_normalize(z, 0).unwrap();
        assert_eq!(g.value(n).data(), &[0.; 3]);
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = g.constant(Tensor::zeros(&[3, 2]).unwrap()).unwrap();
        assert!(matches!(g.hadamard(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(g.concat(&[a, b], 0), Err(TensorError::ShapeMismatch { .. })));
        let c = g.concat(&[a, b], 1);
        assert!(c.is_err());
        let c = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.shape(c), &[4, 3]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).requiring_grad()).unwrap();
        let y = g.hadamard(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let xs = rand_tensor(&[5], 16);
        let mut g = Graph::new();
        let x = g.leaf(xs.clone().requiring_grad()).unwrap();
        let s = g.sigmoid(x).unwrap();
        let y = g.sum(s).unwrap();
        g.backward(y).unwrap();
        for (gr, &xv) in g.grad(x).unwrap().iter().zip(xs.data()) {
            let sv = math::sigmoid(xv);
            assert!((gr - sv * (1.0 - sv)).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]).unwrap().requiring_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).requiring_grad()).unwrap();
        let unused = g.leaf(Tensor::zeros(&[3]).unwrap().requiring_grad()).unwrap();
        let y = g.scale(x, 4.0).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300)).unwrap();
        assert_eq!(g.scale(x, 1e300), Err(TensorError::NonFinite { op: "scale" }));
        assert!(Tensor::new(&[2], vec![1.0]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn harness_linear_and_cubic() {
        let w = rand_tensor(&[4], 17);
        let err = finite_diff_check(
            |g, x| {
                let w = g.constant(w.clone())?;
                let y = g.hadamard(x, w)?;
                g.sum(y)
            },
            &rand_tensor(&[4], 18),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");

        let h = 1e-3;
        let err = finite_diff_check(
            |g, x| {
                let x2 = g.hadamard(x, x)?;
                let x3 = g.hadamard(x2, x)?;
                g.sum(x3)
            },
            &Tensor::scalar(2.0),
            h,
        )
        .unwrap();
        // central difference of x^3 overshoots by exactly h^2
        assert!((err - h * h / (12.0 + h * h)).abs() < 1e-9, "{err}");
    }

    #[test]
    fn harness_matmul_softmax_chain() {
        let b = rand_tensor(&[4, 3], 20);
        let w = rand_tensor(&[2, 3], 21);
        let err = finite_diff_check(
            |g, x| {
                let b = g.constant(b.clone())?;
                let y = g.matmul(x, b)?;
                let y = g.softmax(y, 1)?;
                let w = g.constant(w.clone())?;
                let y = g.hadamard(y, w)?;
                g.sum(y)
            },
            &rand_tensor(&[2, 4], 19),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn reused_tensor_accumulates() {
        let err = finite_diff_check(
            |g, x| {
                let a = g.sigmoid(x)?;
                let b = g.hadamard(a, x)?;
                let c = g.add(b, a)?;
                let d = g.matmul_nt(c, x)?;
                g.sum(d)
            },
            &rand_tensor(&[3, 4], 22),
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn structural_ops_grad() {
        let w = rand_tensor(&[6, 5], 25);
        let err = finite_diff_check_many(
            |g, v| {
                let rep = g.repeat_rows(v[1], 3)?;
                let cat = g.concat(&[v[0], rep], 0)?;
                let nar = g.narrow(cat, 1, 1, 3)?;
                let other = g.narrow(cat, 1, 0, 2)?;
                let both = g.concat(&[nar, other], 1)?;
                let row = g.narrow(v[2], 0, 0, 1)?;
                let both = g.mul_row(both, v[3])?;
                let both = g.add_row(both, row)?;
                let sub = g.sub(both, cat)?;
                let w = g.constant(w.clone())?;
                let y = g.hadamard(sub, w)?;
                let y = g.relu(y)?;
                let y = g.l2_normalize(y, 1)?;
                let y = g.scale(y, 0.7)?;
                let y = g.hadamard(y, w)?;
                g.sum(y)
            },
            &[
                rand_tensor(&[3, 5], 23),
                rand_tensor(&[1, 5], 24),
                rand_tensor(&[1, 5], 26),
                rand_tensor(&[5], 27),
            ],
            FD_STEP,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn focal_logits_grad_and_mask() {
        let targets = [1., 0., 1., 0., 0., 1.];
        let mask = [1., 1., 0., 1., 0., 1.];
        let f = |g: &mut Graph, x: Var| g.focal_loss_logits(x, &targets, &mask, 0.5, 0.1);
        let x = rand_tensor(&[2, 3], 28);
        let err = finite_diff_check(f, &x, FD_STEP).unwrap();
        assert!(err < 1e-6, "{err}");
        let mut g = Graph::new();
        let v = g.leaf(x.requiring_grad()).unwrap();
        let y = f(&mut g, v).unwrap();
        g.backward(y).unwrap();
        let gr = g.grad(v).unwrap();
        assert_eq!(gr[2], 0.0);
        assert_eq!(gr[4], 0.0);
    }

    #[test]
    fn focal_logits_value() {
        // p = 0.9 positive
        let x = math::ln(0.9 / 0.1);
        let mut g = Graph::new();
        let v = g.constant(Tensor::scalar(x)).unwrap();
        let y = g.focal_loss_logits(v, &[1.0], &[1.0], 0.5, 0.1).unwrap();
        assert!((g.value(y).item() - 0.04185).abs() < 1e-5);
    }

    fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..=8, 1..=3)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn softmax_row_stochastic(shape in shape_strategy(), seed in any::<u64>(), scale in 0.1f64..500.0) {
            let axis = (seed as usize) % shape.len();
            let mut t = rand_tensor(&shape, seed);
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
            let mut g = Graph::new();
            let x = g.constant(t).unwrap();
            let y = g.softmax(x, axis).unwrap();
            let (outer, n, inner) = axis_split(&shape, axis);
            let d = g.value(y).data();
            for o in 0..outer {
                for j in 0..inner {
                    let s: f64 = (0..n).map(|i| d[(o * n + i) * inner + j]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn layer_norm_moments(shape in shape_strategy(), seed in any::<u64>(), scale in 1.0f64..100.0) {
            let d = *shape.last().unwrap();
            prop_assume!(d >= 2);
            let mut t = rand_tensor(&shape, seed);
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
            let x = t.data().to_vec();
            let y = ln_plain(t);
            for (row, src) in y.chunks(d).zip(x.chunks(d)) {
                let moments = |r: &[f64]| {
                    let m = r.iter().sum::<f64>() / d as f64;
                    (m, r.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64)
                };
                let (mean, var) = moments(row);
                let (_, var_in) = moments(src);
                prop_assert!(mean.abs() < 1e-10);
                // eps = 1e-5 shrinks the variance to var_in / (var_in + eps)
                prop_assert!((var - var_in / (var_in + 1e-5)).abs() < 1e-10);
                if var_in >= 10.0 {
                    prop_assert!((var - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn every_op_gradient(shape in shape_strategy(), seed in any::<u64>()) {
            let axis = (seed as usize) % shape.len();
            let w = rand_tensor(&shape, seed ^ 0x55);
            let d = *shape.last().unwrap();
            let row = rand_tensor(&[d], seed ^ 0x77);
            let x = rand_tensor(&shape, seed);
            let err = finite_diff_check(
                |g, x| {
                    let w = g.constant(w.clone())?;
                    let r = g.constant(row.clone())?;
                    let a = g.softmax(x, axis)?;
                    let b = g.l2_normalize(x, axis)?;
                    let c = g.layer_norm(x, r, r, 1e-5)?;
                    let e = g.sigmoid(x)?;
                    let f = g.add_row(x, r)?;
                    let f = g.mul_row(f, r)?;
                    let s = g.add(a, b)?;
                    let s = g.sub(s, c)?;
                    let s = g.hadamard(s, e)?;
                    let s = g.add(s, f)?;
                    let s = g.concat(&[s, x], axis)?;
                    let s = g.narrow(s, axis, 1, shape[axis])?;
                    let s = g.hadamard(s, w)?;
                    g.sum(s)
                },
                &x,
                FD_STEP,
            ).unwrap();
            prop_assert!(err < 1e-4, "err {}", err);
        }

        #[test]
        fn matmul_gradient_random(m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()) {
            let err = finite_diff_check_many(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let z = g.matmul_nt(y, v[1])?;
                    let z = g.relu(z)?;
                    let z = g.sigmoid(z)?;
                    g.sum(z)
                },
                &[rand_tensor(&[m, k], seed), rand_tensor(&[k, n], seed.wrapping_add(1))],
                FD_STEP,
            ).unwrap();
            prop_assert!(err < 1e-4, "err {}", err);
        }
    }
}
