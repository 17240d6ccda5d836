//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes. Inputs are registered as
//! leaves with [`Tape::param`] (gradient wanted) or [`Tape::constant`]; each op
//! returns a [`Var`] handle to its output. [`Tape::backward`] walks the record
//! in reverse once and leaves a gradient on every `requires_grad` leaf.
//!
//! ```
//! use compt_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```
//!
//! Nodes whose inputs carry no gradient are skipped on the way back, so a
//! frozen network registered through [`Tape::constant`] costs forward time only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::TensorError;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy { x: Var, weights: Var, index: usize },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Softmax { x: Var, axis: usize },
    Sigmoid(Var),
    Log(Var),
    Gelu(Var),
    RmsNorm(Var),
    Mean(Var),
    Sum(Var),
    Embedding { table: Var, ids: Vec<usize> },
    GatherCols { x: Var, cols: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

type OpResult = Result<Var, TensorError>;

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * libm::exp(-0.5 * x * x)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Softmax of a slice, stable against large inputs.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| libm::exp(x - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numerical floor inside [`Tape::rms_norm`].
pub const RMS_EPS: f64 = 1e-6;

fn row_rms(row: &[f64]) -> f64 {
    libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS)
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::InvalidAxis {
            op,
            axis: 1,
            rank: other.len(),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// frozen constants can be reused for many forward-only passes.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    ///
    /// `None` before `backward` and for leaves registered without gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    // ---- forward ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let (m, k) = expect_matrix("matmul", self.value(a))?;
        let (k2, n) = expect_matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> OpResult {
        let (r, c) = expect_matrix("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(op, a, b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.value(a).shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> OpResult {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r x c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> OpResult {
        let (r, c) = expect_matrix("add_row", self.value(x))?;
        if self.value(row).len() != c {
            return Err(self.mismatch("add_row", x, row));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(row).data();
        for i in 0..r {
            for (o, b) in out[i * c..(i + 1) * c].iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Multiplies `x` by the recorded scalar `weights[index]`.
    pub fn scale_by(&mut self, x: Var, weights: Var, index: usize) -> OpResult {
        let bound = self.value(weights).len();
        if index >= bound {
            return Err(TensorError::IndexOutOfRange {
                op: "scale_by",
                index,
                bound,
            });
        }
        let w = self.value(weights).data()[index];
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * w).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(weights);
        Ok(self.push(t, Op::ScaleBy { x, weights, index }, rg))
    }

    /// Concatenates matrices along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> OpResult {
        let first = *parts.first().ok_or(TensorError::Domain {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let (_, c) = expect_matrix("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = expect_matrix("concat_rows", self.value(p))?;
            if pc != c {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> OpResult {
        let (r, _) = expect_matrix("slice_rows", self.value(x))?;
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                bound: r,
            });
        }
        let t = self.value(x).slice_rows(start, end);
        let rg = self.rg(x);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> OpResult {
        let t = self.value(x);
        let rank = t.shape().len().max(1);
        if axis >= rank {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                rank: t.shape().len(),
            });
        }
        let shape: Vec<usize> = if t.shape().is_empty() { vec![1] } else { t.shape().to_vec() };
        let (outer, len, inner) = axis_layout(&shape, axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = libm::exp(src[base + j * inner] - max);
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid_scalar)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), gelu_scalar)
    }

    pub fn log(&mut self, x: Var) -> OpResult {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(x, Op::Log(x), libm::log))
    }

    /// Scales every row of a matrix to unit root-mean-square.
    pub fn rms_norm(&mut self, x: Var) -> OpResult {
        let (rows, cols) = expect_matrix("rms_norm", self.value(x))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(cols) {
            let r = row_rms(row);
            row.iter_mut().for_each(|v| *v /= r);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::RmsNorm(x), rg))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Gathers rows of a `vocab x d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> OpResult {
        let (vocab, d) = expect_matrix("embedding", self.value(table))?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Selects columns of a matrix, in the given order.
    pub fn gather_cols(&mut self, x: Var, cols: &[usize]) -> OpResult {
        let (r, c) = expect_matrix("gather_cols", self.value(x))?;
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_cols",
                index: bad,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * cols.len());
        for i in 0..r {
            out.extend(cols.iter().map(|&j| src[i * c + j]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, cols.len()], out)?,
            Op::GatherCols {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> OpResult {
        let t = self.value(logits);
        let (rows, classes) = (t.rows(), t.cols());
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            if target >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: target,
                    bound: classes,
                });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
            loss += lse - row[target];
        }
        loss /= rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.value(a).shape().to_vec(),
            rhs: self.value(b).shape().to_vec(),
        }
    }

    // ---- reverse pass ------------------------------------------------------

    /// Propagates `d loss / d leaf` to every `requires_grad` leaf.
    ///
    /// Leaves that the loss does not depend on receive an all-zero gradient.
    /// A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let seed = Tensor::full(loss_value.shape(), 1.0);
        self.backward_done = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads
                    .get_mut(idx)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                node.grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                acc(*a, &|ga| gemm_nt(gd, bv.data(), ga, m, n, k));
                acc(*b, &|gb| gemm_tn(av.data(), gd, gb, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                acc(*a, &|ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, gd));
                acc(*b, &|gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &|ga| add_into(ga, gd));
                acc(*b, &|gb| {
                    for (o, v) in gb.iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::AddRow(x, row) => {
                let c = self.value(*x).cols();
                acc(*x, &|gx| add_into(gx, gd));
                acc(*row, &|gr| {
                    for chunk in gd.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(gd).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(x, factor) => {
                acc(*x, &|gx| {
                    for (o, gv) in gx.iter_mut().zip(gd) {
                        *o += gv * factor;
                    }
                });
            }
            Op::ScaleBy { x, weights, index } => {
                let w = self.value(*weights).data()[*index];
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for (o, gv) in gx.iter_mut().zip(gd) {
                        *o += gv * w;
                    }
                });
                acc(*weights, &|gw| {
                    gw[*index] += gd.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    acc(*p, &|gp| add_into(gp, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let off = start * c;
                acc(*x, &|gx| add_into(&mut gx[off..off + gd.len()], gd));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let shape: Vec<usize> = if node.value.shape().is_empty() {
                    vec![1]
                } else {
                    node.value.shape().to_vec()
                };
                let (outer, len, inner) = axis_layout(&shape, *axis);
                acc(*x, &|gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| y[base + j * inner] * gd[base + j * inner]).sum();
                            for j in 0..len {
                                let at = base + j * inner;
                                gx[at] += y[at] * (gd[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|gx| {
                    for ((o, gv), s) in gx.iter_mut().zip(gd).zip(y) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gv / v;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|gx| {
                    for ((o, gv), &v) in gx.iter_mut().zip(gd).zip(xv) {
                        *o += gv * gelu_grad_scalar(v);
                    }
                });
            }
            Op::RmsNorm(x) => {
                let xv = self.value(*x).data();
                let y = node.value.data();
                let cols = node.value.cols();
                acc(*x, &|gx| {
                    for (((gx, g), y), x) in gx
                        .chunks_mut(cols)
                        .zip(gd.chunks(cols))
                        .zip(y.chunks(cols))
                        .zip(xv.chunks(cols))
                    {
                        let r = row_rms(x);
                        let dot = g.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for ((o, gv), yv) in gx.iter_mut().zip(g).zip(y) {
                            *o += (gv - yv * dot) / r;
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = gd[0] / n;
                acc(*x, &|gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                acc(*x, &|gx| gx.iter_mut().for_each(|o| *o += gv));
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).cols();
                acc(*table, &|gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gd[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::GatherCols { x, cols } => {
                let c = self.value(*x).cols();
                let k = cols.len();
                acc(*x, &|gx| {
                    for (i, grow) in gd.chunks(k).enumerate() {
                        for (&j, gv) in cols.iter().zip(grow) {
                            gx[i * c + j] += gv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let rows = targets.len();
                let scale = gd[0] / rows as f64;
                acc(*logits, &|gl| {
                    for (i, &target) in targets.iter().enumerate() {
                        let probs = softmax_slice(lv.row(i));
                        let c = probs.len();
                        for (j, p) in probs.into_iter().enumerate() {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            gl[i * c + j] += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
