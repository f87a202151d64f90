//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every op in execution order, so node indices are a
//! valid topological order and the backward pass is a single reverse sweep.
//! Tapes are rebuilt for every training iteration and consumed by
//! [`Tape::backward`].

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Norm floor used by [`Tape::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;
/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    Gelu(Var),
    Log(Var),
    Pow(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    L2Normalize(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    SoftmaxComplementRows {
        x: Var,
        probs: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanOf(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when the loss does not reach it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match self.grads[var.0].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

/// Accumulation buffer for `dst`, zero-initialised on first use.
fn slot(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
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

    /// Records an input. Grad-flagged leaves are the differentiable
    /// parameters of the computation.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn matmul_dims(&self, op: &'static str, a: Var, b: Var, transpose_b: bool) -> Result<(usize, usize, usize)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 {
            return Err(Error::InvalidShape {
                op,
                shape: tb.shape().to_vec(),
                reason: "right operand must be rank 2".into(),
            });
        }
        let (bk, bn) = if transpose_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if ta.cols() != bk {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok((ta.rows(), bk, bn))
    }

    /// `a·b`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            n as isize,
            1,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = self.matmul_dims("matmul_nt", a, b, true)?;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            1,
            k as isize,
            &mut out,
            n as isize,
            1,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), rg))
    }

    /// Adds a `1×C` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.numel() != tx.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: tx.shape().to_vec(),
                right: tr.shape().to_vec(),
            });
        }
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Joins token sequences along the token (row) axis. Zero-row inputs
    /// are allowed and contribute nothing.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_tokens", "no inputs"))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_tokens",
                    left: self.shape(*first).to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / c.max(1);
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, c], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..start+len` of the row view of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(Error::InvalidShape {
                op: "slice_tokens",
                shape: t.shape().to_vec(),
                reason: format!("rows {start}..{} out of range", start + len),
            });
        }
        let c = t.cols();
        let data = t.data()[start * c..(start + len) * c].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], data),
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Gathers rows of `x` by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::InvalidShape {
                    op: "select_rows",
                    shape: t.shape().to_vec(),
                    reason: format!("row {i} out of range"),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let rg = self.requires_grad(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], data),
            Op::SelectRows(x, idx.to_vec()),
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), |v| gelu_parts(v).0)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0))
        {
            return Err(Error::NonPositiveLog { index, value });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    /// `x^c` elementwise. `x^0` is 1 with zero gradient everywhere.
    pub fn pow(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Pow(x, c), |v| if c == 0.0 { 1.0 } else { v.powf(c) })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Row-wise `x / max(‖x‖₂, 1e-12)`.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        self.push(value, Op::L2Normalize(x), rg)
    }

    /// Row-wise layer normalisation with per-feature affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: t.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = t.rows();
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.cols() == 0 {
            return Err(Error::InvalidShape {
                op: "softmax_rows",
                shape: t.shape().to_vec(),
                reason: "empty last axis".into(),
            });
        }
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(t.cols()) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// `1 − softmax(x)` over the last axis, each entry summed from the other
    /// classes' exponentials so it keeps full precision when a probability
    /// is close to 1.
    pub fn softmax_complement_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if c == 0 {
            return Err(Error::InvalidShape {
                op: "softmax_complement_rows",
                shape: t.shape().to_vec(),
                reason: "empty last axis".into(),
            });
        }
        let mut probs = t.data().to_vec();
        let mut data = vec![0.0; probs.len()];
        let mut suffix = vec![0.0; c + 1];
        for (row, out) in probs.chunks_mut(c).zip(data.chunks_mut(c)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            for i in (0..c).rev() {
                suffix[i] = suffix[i + 1] + row[i];
            }
            let total = suffix[0];
            let mut prefix = 0.0;
            for i in 0..c {
                out[i] = (prefix + suffix[i + 1]) / total;
                prefix += row[i];
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SoftmaxComplementRows { x, probs }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `T×d`; `k` and `v`
    /// are `S×d`. Returns `T×d` with heads concatenated along features.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: tq.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        if tk.rows() != tv.rows() {
            return Err(Error::ShapeMismatch {
                op: "attention",
                left: tk.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        let (t, s) = (tq.rows(), tk.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * s];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * s..(h + 1) * t * s];
            gemm(
                t,
                dh,
                s,
                &tq.data()[off..],
                d as isize,
                1,
                &tk.data()[off..],
                1,
                d as isize,
                p,
                s as isize,
                1,
                false,
            );
            for row in p.chunks_mut(s.max(1)) {
                for x in row.iter_mut() {
                    *x *= scale;
                }
                softmax_in_place(row);
            }
            gemm(
                t,
                s,
                dh,
                p,
                s as isize,
                1,
                &tv.data()[off..],
                d as isize,
                1,
                &mut out[off..],
                d as isize,
                1,
                false,
            );
        }
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            Tensor::from_parts(vec![t, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Elementwise mean of equally shaped inputs.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("mean_of", "no inputs"))?;
        for &p in &parts[1..] {
            self.same_shape("mean_of", first, p)?;
        }
        let mut data = vec![0.0; self.value(first).numel()];
        for &p in parts {
            for (a, b) in data.iter_mut().zip(self.value(p).data()) {
                *a += b;
            }
        }
        let inv = 1.0 / parts.len() as f64;
        for a in &mut data {
            *a *= inv;
        }
        let value = Tensor::from_parts(self.shape(first).to_vec(), data);
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::MeanOf(parts.to_vec()), rg))
    }

    /// Propagates `∂loss/∂node` to every grad-flagged node. Consumes the
    /// tape's backward capability.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if rg(x) {
                        add_into(&mut grads[x.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if rg(*b) {
                    let dst = slot(&mut grads[b.0], g.len());
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, other) in [(*a, *b), (*b, *a)] {
                    if rg(x) {
                        let o = val(other).data();
                        let dst = slot(&mut grads[x.0], g.len());
                        for j in 0..g.len() {
                            dst[j] += g[j] * o[j];
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if rg(*x) {
                    let dst = slot(&mut grads[x.0], g.len());
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }
            Op::AddScalar(x) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if rg(*a) {
                    // dA = G·Bᵀ
                    let dst = slot(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, n as isize, 1, tb.data(), 1, n as isize, dst, k as isize, 1, true);
                }
                if rg(*b) {
                    // dB = Aᵀ·G
                    let dst = slot(&mut grads[b.0], k * n);
                    gemm(k, m, n, ta.data(), 1, k as isize, g, n as isize, 1, dst, n as isize, 1, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if rg(*a) {
                    // dA = G·B
                    let dst = slot(&mut grads[a.0], m * k);
                    gemm(m, n, k, g, n as isize, 1, tb.data(), k as isize, 1, dst, k as isize, 1, true);
                }
                if rg(*b) {
                    // dB = Gᵀ·A
                    let dst = slot(&mut grads[b.0], n * k);
                    gemm(n, m, k, g, 1, n as isize, ta.data(), k as isize, 1, dst, k as isize, 1, true);
                }
            }
            Op::AddRow(x, row) => {
                if rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if rg(*row) {
                    let c = val(*row).numel();
                    let dst = slot(&mut grads[row.0], c);
                    for chunk in g.chunks(c) {
                        for (d, gv) in dst.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(*p).numel();
                    if rg(*p) {
                        add_into(&mut grads[p.0], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                if rg(*x) {
                    let t = val(*x);
                    let off = start * t.cols();
                    let dst = slot(&mut grads[x.0], t.numel());
                    for (d, gv) in dst[off..off + g.len()].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SelectRows(x, idx) => {
                if rg(*x) {
                    let t = val(*x);
                    let c = t.cols();
                    let dst = slot(&mut grads[x.0], t.numel());
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dst[src * c + j] += g[r * c + j];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    let xs = val(*x).data();
                    let dst = slot(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * gelu_parts(xs[j]).1;
                    }
                }
            }
            Op::Log(x) => {
                if rg(*x) {
                    let xs = val(*x).data();
                    let dst = slot(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] / xs[j];
                    }
                }
            }
            Op::Pow(x, c) => {
                if rg(*x) && *c != 0.0 {
                    let xs = val(*x).data();
                    let dst = slot(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        dst[j] += g[j] * c * xs[j].powf(c - 1.0);
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                if rg(*x) {
                    let xs = val(*x).data();
                    let dst = slot(&mut grads[x.0], g.len());
                    for j in 0..g.len() {
                        if xs[j] >= *lo && xs[j] <= *hi {
                            dst[j] += g[j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if rg(*x) {
                    let len = val(*x).numel();
                    let dst = slot(&mut grads[x.0], len);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                if rg(*x) {
                    let len = val(*x).numel();
                    let share = g[0] / len as f64;
                    let dst = slot(&mut grads[x.0], len);
                    for d in dst.iter_mut() {
                        *d += share;
                    }
                }
            }
            Op::L2Normalize(x) => {
                if rg(*x) {
                    let xs = val(*x);
                    let y = node.value.data();
                    let c = xs.cols();
                    let dst = slot(&mut grads[x.0], g.len());
                    for r in 0..xs.rows() {
                        let xr = xs.row(r);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let span = r * c..(r + 1) * c;
                        let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                        if norm > NORM_FLOOR {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                dst[r * c + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..c {
                                dst[r * c + j] += gr[j] / NORM_FLOOR;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = val(*x).cols();
                let rows = val(*x).rows();
                if rg(*gamma) {
                    let dst = slot(&mut grads[gamma.0], c);
                    for r in 0..rows {
                        for j in 0..c {
                            dst[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if rg(*beta) {
                    let dst = slot(&mut grads[beta.0], c);
                    for r in 0..rows {
                        for j in 0..c {
                            dst[j] += g[r * c + j];
                        }
                    }
                }
                if rg(*x) {
                    let gam = val(*gamma).data();
                    let dst = slot(&mut grads[x.0], rows * c);
                    let mut dxhat = vec![0.0; c];
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[r * c + j] * gam[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dst[r * c + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(*x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let dst = slot(&mut grads[x.0], g.len());
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SoftmaxComplementRows { x, probs } => {
                if rg(*x) {
                    let c = node.value.cols();
                    let dst = slot(&mut grads[x.0], g.len());
                    for (r, (yr, gr)) in probs.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dst[r * c + j] -= yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::MeanOf(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for p in parts {
                    if rg(*p) {
                        let dst = slot(&mut grads[p.0], g.len());
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let (rq, rk, rv) = (
            self.nodes[q.0].requires_grad,
            self.nodes[k.0].requires_grad,
            self.nodes[v.0].requires_grad,
        );
        let d = tq.cols();
        let (t, s) = (tq.rows(), tk.rows());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ld = d as isize;

        let mut dq = rq.then(|| vec![0.0; t * d]);
        let mut dk = rk.then(|| vec![0.0; s * d]);
        let mut dv = rv.then(|| vec![0.0; s * d]);
        let mut dp = vec![0.0; t * s];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * t * s..(h + 1) * t * s];
            if let Some(dv) = dv.as_mut() {
                // dV_h = Pᵀ·G_h
                gemm(s, t, dh, p, 1, s as isize, &g[off..], ld, 1, &mut dv[off..], ld, 1, true);
            }
            if !(rq || rk) {
                continue;
            }
            // dP = G_h·V_hᵀ
            gemm(t, dh, s, &g[off..], ld, 1, &tv.data()[off..], 1, ld, &mut dp, s as isize, 1, false);
            // dScores = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the scale
            for (pr, dr) in p.chunks(s.max(1)).zip(dp.chunks_mut(s.max(1))) {
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (dv_, pv) in dr.iter_mut().zip(pr) {
                    *dv_ = pv * (*dv_ - dot) * scale;
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(t, s, dh, &dp, s as isize, 1, &tk.data()[off..], ld, 1, &mut dq[off..], ld, 1, true);
            }
            if let Some(dk) = dk.as_mut() {
                gemm(s, t, dh, &dp, 1, s as isize, &tq.data()[off..], ld, 1, &mut dk[off..], ld, 1, true);
            }
        }
        for (var, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(grad) = grad {
                add_into(&mut grads[var.0], &grad);
            }
        }
    }
}
