//! Dense rank-2 tensors and a reverse-mode tape.
//!
//! Every forward pass records its primitive operations on a [`Tape`]. Values are
//! stored on the tape itself; a [`Var`] is just an index into it. Parameters live
//! in a [`ParameterSet`] and are copied onto the tape with [`Tape::bind`] at the
//! start of a pass, so a parameter used many times (for example by every stage of
//! every solver step) maps to a single leaf whose gradient accumulates additively.
//!
//! All values are `f64`. Any operation that produces a non-finite value fails
//! with [`AutodiffError::NonFinite`] naming the operation.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got a {0}x{1} tensor")]
    NotScalar(usize, usize),
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(AutodiffError::Invalid {
                op: "from_vec",
                msg: format!("{} values for a {rows}x{cols} tensor", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a tensor from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.frobenius_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Value-level matrix product (no tape).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(AutodiffError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out.data);
        Ok(out)
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn add_scaled_assign(&mut self, other: &Tensor, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

// out (m x n) += a (m x k) * b (k x n)
fn matmul_into(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aik = a.data[i * k + p];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out (m x k) += g (m x n) * b^T  where b is (k x n)
fn matmul_bt_into(g: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, n, k) = (g.rows, g.cols, b.rows);
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b.data[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

// out (k x n) += a^T * g  where a is (m x k), g is (m x n)
fn matmul_at_into(a: &Tensor, g: &Tensor, out: &mut [f64]) {
    let (m, k, n) = (a.rows, a.cols, g.cols);
    for i in 0..m {
        let grow = &g.data[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a parameter inside its [`ParameterSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    Affine {
        weight: usize,
        input: usize,
        bias: usize,
        time: Option<(usize, f64)>,
    },
    Relu(usize),
    SoftmaxColumns(usize),
    FrobeniusSq(usize),
    Sum(usize),
    LinComb(Vec<(usize, f64)>),
    RowSlice {
        src: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    SelectColumns {
        src: usize,
        cols: Vec<usize>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        span: usize,
        scale: f64,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Affine { .. } => "affine",
            Op::Relu(..) => "relu",
            Op::SoftmaxColumns(..) => "softmax_columns",
            Op::FrobeniusSq(..) => "frobenius_sq",
            Op::Sum(..) => "sum",
            Op::LinComb(..) => "lincomb",
            Op::RowSlice { .. } => "row_slice",
            Op::ConcatRows(..) => "concat_rows",
            Op::SelectColumns { .. } => "select_columns",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Inputs always precede outputs.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Drops every node recorded at or after `mark` (a previous [`Tape::len`]).
    ///
    /// Vars pointing past `mark` become dangling and must not be used again.
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(idx))
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a leaf whose gradient is tracked.
    pub fn var(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Copies every parameter onto the tape; the returned vector is indexed by [`ParamId`].
    pub fn bind(&mut self, params: &ParameterSet) -> Result<Vec<Var>> {
        params
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.push(
                    p.value.clone(),
                    Op::Leaf {
                        param: Some(ParamId(i)),
                    },
                    true,
                )
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.1 == 1 && sa.0 == sb.0) {
            Ok(())
        } else {
            Err(AutodiffError::Shape { op, lhs: sa, rhs: sb })
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.clone();
        if ta.shape() == tb.shape() {
            for (o, &y) in out.data.iter_mut().zip(&tb.data) {
                *o = f(*o, y);
            }
        } else {
            let cols = ta.cols;
            for r in 0..ta.rows {
                let y = tb.data[r];
                for o in &mut out.data[r * cols..(r + 1) * cols] {
                    *o = f(*o, y);
                }
            }
        }
        out
    }

    /// `a + b`; `b` may be a column vector broadcast across the columns of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    /// `a - b`; `b` may be a column vector broadcast across the columns of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("sub", a, b)?;
        let value = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::Shape {
                op: "hadamard",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        let value = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.rg(&[a.0, b.0]);
        self.push(value, Op::Hadamard(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Relu(a.0), rg)
    }

    /// `W x + b 1ᵀ (+ c t 1ᵀ)`, fused into one node.
    pub fn affine(&mut self, weight: Var, input: Var, bias: Var, time: Option<(Var, f64)>) -> Result<Var> {
        let (w, x, b) = (self.value(weight), self.value(input), self.value(bias));
        if w.cols != x.rows {
            return Err(AutodiffError::Shape {
                op: "affine",
                lhs: w.shape(),
                rhs: x.shape(),
            });
        }
        if b.shape() != (w.rows, 1) {
            return Err(AutodiffError::Shape {
                op: "affine",
                lhs: w.shape(),
                rhs: b.shape(),
            });
        }
        if let Some((c, _)) = time {
            if self.shape(c) != (w.rows, 1) {
                return Err(AutodiffError::Shape {
                    op: "affine",
                    lhs: w.shape(),
                    rhs: self.shape(c),
                });
            }
        }
        let n = x.cols;
        let mut out = Tensor::zeros(w.rows, n);
        for r in 0..w.rows {
            let mut shift = b.data[r];
            if let Some((c, t)) = time {
                shift += self.nodes[c.0].value.data[r] * t;
            }
            out.data[r * n..(r + 1) * n].fill(shift);
        }
        matmul_into(w, x, &mut out.data);
        let mut ids = vec![weight.0, input.0, bias.0];
        if let Some((c, _)) = time {
            ids.push(c.0);
        }
        let rg = self.rg(&ids);
        self.push(
            out,
            Op::Affine {
                weight: weight.0,
                input: input.0,
                bias: bias.0,
                time: time.map(|(c, t)| (c.0, t)),
            },
            rg,
        )
    }

    /// Column-wise softmax, stabilized by subtracting each column's maximum.
    pub fn softmax_columns(&mut self, a: Var) -> Result<Var> {
        let value = softmax_columns(self.value(a));
        let rg = self.rg(&[a.0]);
        self.push(value, Op::SoftmaxColumns(a.0), rg)
    }

    /// Sum of squared entries as a 1x1 tensor.
    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).frobenius_sq());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::FrobeniusSq(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let rg = self.rg(&[a.0]);
        self.push(value, Op::Sum(a.0), rg)
    }

    /// `Σ coef_i · term_i` over same-shape terms.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or(AutodiffError::Invalid {
            op: "lincomb",
            msg: "no terms".into(),
        })?;
        let shape = self.shape(first.0);
        let mut out = Tensor::zeros(shape.0, shape.1);
        for &(v, c) in terms {
            if self.shape(v) != shape {
                return Err(AutodiffError::Shape {
                    op: "lincomb",
                    lhs: shape,
                    rhs: self.shape(v),
                });
            }
            if c != 0.0 {
                out.add_scaled_assign(&self.nodes[v.0].value, c);
            }
        }
        let ids: Vec<usize> = terms.iter().map(|(v, _)| v.0).collect();
        let rg = self.rg(&ids);
        self.push(out, Op::LinComb(terms.iter().map(|&(v, c)| (v.0, c)).collect()), rg)
    }

    pub fn row_slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start >= end || end > t.rows {
            return Err(AutodiffError::Invalid {
                op: "row_slice",
                msg: format!("rows {start}..{end} of a {}x{} tensor", t.rows, t.cols),
            });
        }
        let value = Tensor {
            rows: end - start,
            cols: t.cols,
            data: t.data[start * t.cols..end * t.cols].to_vec(),
        };
        let rg = self.rg(&[a.0]);
        self.push(value, Op::RowSlice { src: a.0, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or(AutodiffError::Invalid {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(AutodiffError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]),
                    rhs: t.shape(),
                });
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        self.push(Tensor { rows, cols, data }, Op::ConcatRows(ids), rg)
    }

    pub fn select_columns(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = cols.iter().find(|&&c| c >= t.cols) {
            return Err(AutodiffError::Invalid {
                op: "select_columns",
                msg: format!("column {bad} of a {}x{} tensor", t.rows, t.cols),
            });
        }
        let mut out = Tensor::zeros(t.rows, cols.len());
        for r in 0..t.rows {
            for (j, &c) in cols.iter().enumerate() {
                out.data[r * cols.len() + j] = t.data[r * t.cols + c];
            }
        }
        let rg = self.rg(&[a.0]);
        self.push(
            out,
            Op::SelectColumns {
                src: a.0,
                cols: cols.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head scaled dot-product self-attention over column segments.
    ///
    /// `q`, `k`, `v` are `d x n` with `n` a multiple of `span`; each block of `span`
    /// consecutive columns is one independent sequence. Rows are split into `heads`
    /// equal groups. For every head and segment the output is `V softmax_cols(KᵀQ / √dh)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, span: usize) -> Result<Var> {
        let shape = self.shape(q);
        for other in [k, v] {
            if self.shape(other) != shape {
                return Err(AutodiffError::Shape {
                    op: "attention",
                    lhs: shape,
                    rhs: self.shape(other),
                });
            }
        }
        let (d, n) = shape;
        if heads == 0 || d % heads != 0 || span == 0 || n % span != 0 {
            return Err(AutodiffError::Invalid {
                op: "attention",
                msg: format!("{heads} heads, span {span} for a {d}x{n} input"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let segments = n / span;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let mut weights = vec![0.0; heads * segments * span * span];
        let mut out = Tensor::zeros(d, n);
        let mut col = vec![0.0; span];
        for h in 0..heads {
            let r0 = h * dh;
            for s in 0..segments {
                let c0 = s * span;
                let w = &mut weights[(h * segments + s) * span * span..][..span * span];
                // w[i * span + j]: weight of key i for query j
                for j in 0..span {
                    let mut max = f64::NEG_INFINITY;
                    for (i, slot) in col.iter_mut().enumerate() {
                        let mut dot = 0.0;
                        for r in r0..r0 + dh {
                            dot += kt.data[r * n + c0 + i] * qt.data[r * n + c0 + j];
                        }
                        *slot = dot * scale;
                        max = max.max(*slot);
                    }
                    let mut total = 0.0;
                    for slot in col.iter_mut() {
                        *slot = (*slot - max).exp();
                        total += *slot;
                    }
                    for i in 0..span {
                        w[i * span + j] = col[i] / total;
                    }
                }
                for r in r0..r0 + dh {
                    for i in 0..span {
                        let vri = vt.data[r * n + c0 + i];
                        for j in 0..span {
                            out.data[r * n + c0 + j] += vri * w[i * span + j];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q.0, k.0, v.0]);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                span,
                scale,
                weights,
            },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits` (classes x batch) against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.cols != labels.len() {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy",
                msg: format!("{} labels for {} columns", labels.len(), t.cols),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= t.rows) {
            return Err(AutodiffError::Invalid {
                op: "cross_entropy",
                msg: format!("label {bad} with {} classes", t.rows),
            });
        }
        let probs = softmax_columns(t);
        let mut loss = 0.0;
        for (j, &l) in labels.iter().enumerate() {
            // log p computed from the stabilized logits to avoid log(0)
            let mut max = f64::NEG_INFINITY;
            for r in 0..t.rows {
                max = max.max(t.data[r * t.cols + j]);
            }
            let lse: f64 = (0..t.rows)
                .map(|r| (t.data[r * t.cols + j] - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            loss += lse - t.data[l * t.cols + j];
        }
        loss /= labels.len().max(1) as f64;
        let rg = self.rg(&[logits.0]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(AutodiffError::NotScalar(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut leaves = Vec::new();
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                if let Some(g) = grads[idx].take() {
                    leaves.push((idx, g));
                }
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(Gradients { leaves })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `params`.
    pub fn backward_into(&self, loss: Var, params: &mut ParameterSet) -> Result<()> {
        self.backward(loss)?.accumulate(self, params);
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        let slot = &mut grads[idx];
        if slot.is_none() {
            let (r, c) = self.nodes[idx].value.shape();
            *slot = Some(Tensor::zeros(r, c));
        }
        f(slot.as_mut().unwrap());
    }

    fn acc_broadcast(&self, grads: &mut [Option<Tensor>], idx: usize, g: &Tensor, sign: f64) {
        let target = self.nodes[idx].value.shape();
        self.acc(grads, idx, |dst| {
            if target == g.shape() {
                dst.add_scaled_assign(g, sign);
            } else {
                for r in 0..g.rows {
                    let s: f64 = g.data[r * g.cols..(r + 1) * g.cols].iter().sum();
                    dst.data[r] += sign * s;
                }
            }
        });
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.acc(grads, *a, |dst| matmul_bt_into(g, tb, &mut dst.data));
                self.acc(grads, *b, |dst| matmul_at_into(ta, g, &mut dst.data));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |dst| dst.add_assign(g));
                self.acc_broadcast(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |dst| dst.add_assign(g));
                self.acc_broadcast(grads, *b, g, -1.0);
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                self.acc(grads, *a, |dst| {
                    for ((d, gv), bv) in dst.data.iter_mut().zip(&g.data).zip(&tb.data) {
                        *d += gv * bv;
                    }
                });
                self.acc(grads, *b, |dst| {
                    for ((d, gv), av) in dst.data.iter_mut().zip(&g.data).zip(&ta.data) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |dst| dst.add_scaled_assign(g, *s)),
            Op::Affine {
                weight,
                input,
                bias,
                time,
            } => {
                let (w, x) = (&self.nodes[*weight].value, &self.nodes[*input].value);
                self.acc(grads, *weight, |dst| matmul_bt_into(g, x, &mut dst.data));
                self.acc(grads, *input, |dst| matmul_at_into(w, g, &mut dst.data));
                let row_sums: Vec<f64> = g.data.chunks(g.cols.max(1)).map(|row| row.iter().sum()).collect();
                self.acc(grads, *bias, |dst| {
                    for (d, s) in dst.data.iter_mut().zip(&row_sums) {
                        *d += s;
                    }
                });
                if let Some((c, t)) = time {
                    self.acc(grads, *c, |dst| {
                        for (d, s) in dst.data.iter_mut().zip(&row_sums) {
                            *d += s * t;
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let out = &node.value;
                self.acc(grads, *a, |dst| {
                    for ((d, gv), o) in dst.data.iter_mut().zip(&g.data).zip(&out.data) {
                        if *o > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::SoftmaxColumns(a) => {
                let p = &node.value;
                self.acc(grads, *a, |dst| {
                    let (rows, cols) = p.shape();
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| p.data[r * cols + c] * g.data[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            dst.data[i] += p.data[i] * (g.data[i] - dot);
                        }
                    }
                });
            }
            Op::FrobeniusSq(a) => {
                let x = &self.nodes[*a].value;
                let s = 2.0 * g.data[0];
                self.acc(grads, *a, |dst| dst.add_scaled_assign(x, s));
            }
            Op::Sum(a) => {
                let s = g.data[0];
                self.acc(grads, *a, |dst| dst.data.iter_mut().for_each(|d| *d += s));
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if c != 0.0 {
                        self.acc(grads, v, |dst| dst.add_scaled_assign(g, c));
                    }
                }
            }
            Op::RowSlice { src, start } => {
                let cols = g.cols;
                self.acc(grads, *src, |dst| {
                    let off = start * cols;
                    for (d, gv) in dst.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                        *d += gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(grads, p, |dst| {
                        for (d, gv) in dst.data.iter_mut().zip(&g.data[off..off + len]) {
                            *d += gv;
                        }
                    });
                    off += len;
                }
            }
            Op::SelectColumns { src, cols } => {
                let src_cols = self.nodes[*src].value.cols;
                self.acc(grads, *src, |dst| {
                    for r in 0..g.rows {
                        for (j, &c) in cols.iter().enumerate() {
                            dst.data[r * src_cols + c] += g.data[r * g.cols + j];
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                span,
                scale,
                weights,
            } => self.backprop_attention(grads, g, (*q, *k, *v), *heads, *span, *scale, weights),
            Op::CrossEntropy { logits, labels, probs } => {
                let s = g.data[0] / labels.len().max(1) as f64;
                self.acc(grads, *logits, |dst| {
                    let cols = probs.cols;
                    for (i, d) in dst.data.iter_mut().enumerate() {
                        let (r, c) = (i / cols, i % cols);
                        let target = if labels[c] == r { 1.0 } else { 0.0 };
                        *d += s * (probs.data[i] - target);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        (q, k, v): (usize, usize, usize),
        heads: usize,
        span: usize,
        scale: f64,
        weights: &[f64],
    ) {
        let (qt, kt, vt) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let (d, n) = qt.shape();
        let dh = d / heads;
        let segments = n / span;
        let mut dq = Tensor::zeros(d, n);
        let mut dk = Tensor::zeros(d, n);
        let mut dv = Tensor::zeros(d, n);
        let mut dw = vec![0.0; span * span];
        let mut ds = vec![0.0; span * span];
        for h in 0..heads {
            let r0 = h * dh;
            for s in 0..segments {
                let c0 = s * span;
                let w = &weights[(h * segments + s) * span * span..][..span * span];
                // dV = dO Wᵀ ; dW = Vᵀ dO
                for r in r0..r0 + dh {
                    for i in 0..span {
                        let mut acc = 0.0;
                        for j in 0..span {
                            acc += g.data[r * n + c0 + j] * w[i * span + j];
                        }
                        dv.data[r * n + c0 + i] += acc;
                    }
                }
                for i in 0..span {
                    for j in 0..span {
                        let mut acc = 0.0;
                        for r in r0..r0 + dh {
                            acc += vt.data[r * n + c0 + i] * g.data[r * n + c0 + j];
                        }
                        dw[i * span + j] = acc;
                    }
                }
                // softmax backward per query column j
                for j in 0..span {
                    let dot: f64 = (0..span).map(|i| w[i * span + j] * dw[i * span + j]).sum();
                    for i in 0..span {
                        ds[i * span + j] = w[i * span + j] * (dw[i * span + j] - dot) * scale;
                    }
                }
                // S = Kᵀ Q: dQ[:, j] += Σ_i dS_ij K[:, i]; dK[:, i] += Σ_j dS_ij Q[:, j]
                for r in r0..r0 + dh {
                    for i in 0..span {
                        let kri = kt.data[r * n + c0 + i];
                        let mut acc = 0.0;
                        for j in 0..span {
                            let dsij = ds[i * span + j];
                            dq.data[r * n + c0 + j] += dsij * kri;
                            acc += dsij * qt.data[r * n + c0 + j];
                        }
                        dk.data[r * n + c0 + i] += acc;
                    }
                }
            }
        }
        self.acc(grads, q, |dst| dst.add_assign(&dq));
        self.acc(grads, k, |dst| dst.add_assign(&dk));
        self.acc(grads, v, |dst| dst.add_assign(&dv));
    }
}

fn softmax_columns(t: &Tensor) -> Tensor {
    let (rows, cols) = t.shape();
    let mut out = t.clone();
    for c in 0..cols {
        let mut max = f64::NEG_INFINITY;
        for r in 0..rows {
            max = max.max(out.data[r * cols + c]);
        }
        let mut total = 0.0;
        for r in 0..rows {
            let e = (out.data[r * cols + c] - max).exp();
            out.data[r * cols + c] = e;
            total += e;
        }
        for r in 0..rows {
            out.data[r * cols + c] /= total;
        }
    }
    out
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    leaves: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g)
    }

    /// Adds the gradient of every bound parameter leaf into its parameter.
    pub fn accumulate(&self, tape: &Tape, params: &mut ParameterSet) {
        for (idx, g) in &self.leaves {
            if let Op::Leaf { param: Some(id) } = tape.nodes[*idx].op {
                params.params[id.0].grad.add_assign(g);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        let (r, c) = value.shape();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            grad: Tensor::zeros(r, c),
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// All parameter values concatenated in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data.iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.grad.data.iter().copied()).collect()
    }

    /// Inverse of [`ParameterSet::flatten`].
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(AutodiffError::Invalid {
                op: "load_flat",
                msg: format!("{} values for {} scalars", values.len(), self.num_scalars()),
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data.copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn random(rows: usize, cols: usize, seed: &mut u64) -> Tensor {
        let data = (0..rows * cols).map(|_| lcg(seed)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central differences of `f` with respect to every entry of `x`.
    fn fd_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-5;
        let mut g = Tensor::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn assert_grad_close(analytic: &Tensor, numeric: &Tensor, tol: f64) {
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(rel_err(*a, *n) <= tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_identity_and_known_product() {
        let mut tape = Tape::new();
        let m = t(&[&[1.5, -2.0], &[0.25, 3.0]]);
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let mv = tape.constant(m.clone()).unwrap();
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);

        let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = tape.constant(t(&[&[1.0], &[1.0]])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &t(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let b = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matmul",
                lhs: (2, 3),
                rhs: (2, 3)
            }
        );
        assert!(err.to_string().contains("(2, 3) vs (2, 3)"));
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut seed = 7;
        let a = random(3, 3, &mut seed);
        let b = random(3, 3, &mut seed);
        let mut tape = Tape::new();
        let av = tape.var(a.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        let c = tape.matmul(av, bv).unwrap();
        let loss = tape.sum(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        let numeric = fd_grad(&a, |x| x.matmul(&b).unwrap().data().iter().sum());
        assert_grad_close(grads.get(av).unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn elementwise_definitions() {
        let mut tape = Tape::new();
        let mut seed = 3;
        let x = random(2, 3, &mut seed);
        let xv = tape.constant(x.clone()).unwrap();
        let zero = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let s = tape.add(xv, zero).unwrap();
        assert_eq!(tape.value(s), &x);

        let r = tape.constant(t(&[&[-1.0, 2.0]])).unwrap();
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r), &t(&[&[0.0, 2.0]]));

        let n = 4.0;
        let sc = tape.scale(xv, 1.0 / n).unwrap();
        for (a, b) in tape.value(sc).data().iter().zip(x.data()) {
            assert_eq!(*a, b * 0.25);
        }
    }

    #[test]
    fn add_broadcasts_column_vectors_only() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(2, 3)).unwrap();
        let col = tape.constant(Tensor::column(&[1.0, 2.0])).unwrap();
        let y = tape.add(x, col).unwrap();
        assert_eq!(tape.value(y), &t(&[&[1.0, 1.0, 1.0], &[2.0, 2.0, 2.0]]));

        let row = tape.constant(Tensor::zeros(1, 3)).unwrap();
        assert!(matches!(tape.add(x, row), Err(AutodiffError::Shape { op: "add", .. })));
        let bad = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(tape.hadamard(x, bad).is_err());
    }

    #[test]
    fn softmax_columns_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant(t(&[&[0.0, 5.0, 1000.0], &[0.0, 5.0, 0.0], &[0.0, 5.0, 0.0]]))
            .unwrap();
        let p = tape.softmax_columns(x).unwrap();
        let p = tape.value(p);
        assert!((p.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        for r in 0..3 {
            assert!((p.get(r, 1) - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(-1000) underflows to zero; the oracle of the stabilized form is exact here
        assert_eq!(p.get(0, 2), 1.0);
        assert_eq!(p.get(1, 2), 0.0);

        let y = tape.constant(t(&[&[0.0], &[0.0]])).unwrap();
        let q = tape.softmax_columns(y).unwrap();
        assert_eq!(tape.value(q), &t(&[&[0.5], &[0.5]]));
    }

    #[test]
    fn frobenius_sq_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2)).unwrap();
        let f = tape.frobenius_sq(i).unwrap();
        assert_eq!(tape.scalar(f), 2.0);
        let z = tape.constant(Tensor::zeros(3, 2)).unwrap();
        let f = tape.frobenius_sq(z).unwrap();
        assert_eq!(tape.scalar(f), 0.0);

        let mut seed = 11;
        let x = random(4, 3, &mut seed);
        let mut oracle = 0.0;
        for r in 0..4 {
            for c in 0..3 {
                oracle += x.get(r, c) * x.get(r, c);
            }
        }
        let xv = tape.constant(x).unwrap();
        let f = tape.frobenius_sq(xv).unwrap();
        assert!(rel_err(tape.scalar(f), oracle) <= 1e-12);
    }

    #[test]
    fn reused_parameter_accumulates_gradient() {
        let mut params = ParameterSet::new();
        let w = params.insert("w", t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let x = t(&[&[0.5], &[-1.0]]);

        let single = {
            let mut tape = Tape::new();
            let bound = tape.bind(&params).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.matmul(bound[w.index()], xv).unwrap();
            let loss = tape.sum(y).unwrap();
            let mut p = params.clone();
            tape.backward_into(loss, &mut p).unwrap();
            p.grad(w).clone()
        };

        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let xv = tape.constant(x).unwrap();
        let y1 = tape.matmul(bound[w.index()], xv).unwrap();
        let y2 = tape.matmul(bound[w.index()], xv).unwrap();
        let y = tape.add(y1, y2).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward_into(loss, &mut params).unwrap();
        for (a, b) in params.grad(w).data().iter().zip(single.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut params = ParameterSet::new();
        let w = params.insert("w", Tensor::filled(2, 2, 0.3)).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&params).unwrap();
        let z = tape.scale(bound[w.index()], 0.0).unwrap();
        let loss = tape.sum(z).unwrap();
        tape.backward_into(loss, &mut params).unwrap();
        assert!(params.grad(w).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 2)).unwrap();
        assert_eq!(tape.backward(x).unwrap_err(), AutodiffError::NotScalar(2, 2));
    }

    #[test]
    fn non_finite_values_are_reported_with_the_op() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(1, 1, 1e300)).unwrap();
        let err = tape.scale(x, 1e300).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { op: "scale" });
        assert!(tape.var(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut params = ParameterSet::new();
        params.insert("a", Tensor::zeros(1, 1)).unwrap();
        assert_eq!(
            params.insert("a", Tensor::zeros(1, 1)).unwrap_err(),
            AutodiffError::DuplicateParameter("a".into())
        );
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut seed = 99;
        let x = random(4, 6, &mut seed);
        let w = random(4, 4, &mut seed);
        let b = random(4, 1, &mut seed);
        let c = random(4, 1, &mut seed);
        let other = random(4, 6, &mut seed);

        // One composite graph touching every op; checked w.r.t. x, w, b, c.
        let forward = |x: &Tensor, w: &Tensor, b: &Tensor, c: &Tensor, tape: &mut Tape| {
            let xv = tape.var(x.clone()).unwrap();
            let wv = tape.var(w.clone()).unwrap();
            let bv = tape.var(b.clone()).unwrap();
            let cv = tape.var(c.clone()).unwrap();
            let ov = tape.constant(other.clone()).unwrap();
            let a = tape.affine(wv, xv, bv, Some((cv, 0.7))).unwrap();
            let r = tape.relu(a).unwrap();
            let h = tape.hadamard(r, ov).unwrap();
            let s = tape.sub(h, bv).unwrap();
            let sm = tape.softmax_columns(s).unwrap();
            let top = tape.row_slice(sm, 0, 2).unwrap();
            let bottom = tape.row_slice(xv, 2, 4).unwrap();
            let cat = tape.concat_rows(&[bottom, top]).unwrap();
            let m = tape.matmul(wv, cat).unwrap();
            let att = tape.attention(m, xv, cat, 2, 3).unwrap();
            let lc = tape.lincomb(&[(att, 0.5), (xv, -1.5)]).unwrap();
            let sel = tape.select_columns(lc, &[0, 3, 5]).unwrap();
            let logits = tape.row_slice(sel, 1, 3).unwrap();
            let ce = tape.cross_entropy(logits, &[0, 1, 1]).unwrap();
            let f = tape.frobenius_sq(lc).unwrap();
            let f = tape.scale(f, 0.1).unwrap();
            let loss = tape.add(ce, f).unwrap();
            (loss, [xv, wv, bv, cv])
        };

        let mut tape = Tape::new();
        let (loss, vars) = forward(&x, &w, &b, &c, &mut tape);
        let grads = tape.backward(loss).unwrap();
        let inputs = [&x, &w, &b, &c];
        for (k, var) in vars.iter().enumerate() {
            let numeric = fd_grad(inputs[k], |p| {
                let mut args = [x.clone(), w.clone(), b.clone(), c.clone()];
                args[k] = p.clone();
                let mut tape = Tape::new();
                let (l, _) = forward(&args[0], &args[1], &args[2], &args[3], &mut tape);
                tape.scalar(l)
            });
            assert_grad_close(grads.get(*var).unwrap(), &numeric, 1e-6);
        }
    }

    #[test]
    fn flatten_round_trips() {
        let mut params = ParameterSet::new();
        params.insert("a", t(&[&[1.0, 2.0]])).unwrap();
        params.insert("b", Tensor::column(&[3.0, 4.0, 5.0])).unwrap();
        let flat = params.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let mut other = params.clone();
        other.load_flat(&[0.0; 5]).unwrap();
        other.load_flat(&flat).unwrap();
        assert_eq!(other, params);
        assert!(other.load_flat(&[0.0; 4]).is_err());
    }

    #[test]
    fn truncate_discards_trailing_nodes() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0)).unwrap();
        let mark = tape.len();
        tape.scale(x, 3.0).unwrap();
        tape.scale(x, 4.0).unwrap();
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
        let y = tape.scale(x, 5.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }
}
