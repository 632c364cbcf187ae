//! Reverse-mode tape. Every operation appends a node holding its forward
//! value; `backward` walks the nodes in reverse creation order.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::matrix::{gemm, Matrix};
use crate::sparse::SparseOperator;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Assignment of rows to groups, used by segment-wise softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Segments {
    ids: Vec<usize>,
    count: usize,
}

impl Segments {
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&s| s >= count) {
            return Err(TensorError::Contract(format!(
                "segment id {bad} out of range for {count} segments"
            )));
        }
        Ok(Segments { ids, count })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVector(Var, Var),
    MulColumn(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Dropout(Var, Rc<Vec<f64>>),
    MeanRows(Var),
    BroadcastRows(Var),
    Sum(Var),
    CosineRows(Var, Var),
    RowDot(Var, Var),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    SegmentSoftmax(Var, Rc<Segments>),
    SegmentLogSoftmax(Var, Rc<Segments>),
    Spmm(Rc<SparseOperator>, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v` or `v` is a constant.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn accumulate(slot: &mut Option<Matrix>, delta: Matrix) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    dst.iter_mut().for_each(|d| *d /= total);
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity with `cos(x, 0) = 0`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = gemm(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va, vb));
        }
        let out = va.zip_map(vb, f);
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x k` row vector to every row of an `n x k` matrix.
    pub fn add_row_vector(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row_vector", va, vr));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push("add_row_vector", out, Op::AddRowVector(a, row), rg)
    }

    /// Multiplies each row of an `n x k` matrix by the matching entry of an `n x 1` column.
    pub fn mul_column(&mut self, a: Var, column: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(column));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_column", va, vc));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let s = vc.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(&[a, column]);
        self.push("mul_column", out, Op::MulColumn(a, column), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, s), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(TensorError::Contract(format!(
                "slice_cols {start}..{end} of {} columns",
                va.cols()
            )));
        }
        let mut out = Matrix::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        self.push("slice_cols", out, Op::SliceCols(a, start), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            softmax_row(va.row(r), out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push("softmax_rows", out, Op::Softmax(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let mut out = Matrix::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let src = va.row(r);
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (d, s) in out.row_mut(r).iter_mut().zip(src) {
                *d = s - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push("log_softmax_rows", out, Op::LogSoftmax(a), rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(name, out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary("elu", a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let va = self.value(a);
        let mask: Vec<f64> = (0..va.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = Matrix::from_vec(
            va.rows(),
            va.cols(),
            va.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.rg(&[a]);
        self.push("dropout", out, Op::Dropout(a, Rc::new(mask)), rg)
    }

    /// Column-wise mean, `n x k -> 1 x k`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(TensorError::Contract("mean_rows of empty matrix".into()));
        }
        let mut out = Matrix::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / va.rows() as f64);
        let rg = self.rg(&[a]);
        self.push("mean_rows", out, Op::MeanRows(a), rg)
    }

    /// Repeats a `1 x k` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(TensorError::Contract("broadcast_rows expects a single row".into()));
        }
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let out = Matrix::from_vec(n, va.cols(), data)?;
        let rg = self.rg(&[a]);
        self.push("broadcast_rows", out, Op::BroadcastRows(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push("sum", out, Op::Sum(a), rg)
    }

    /// Row-wise cosine similarity, `n x k, n x k -> n x 1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("cosine_rows", va, vb));
        }
        let out: Vec<f64> = (0..va.rows()).map(|r| cosine(va.row(r), vb.row(r))).collect();
        let rg = self.rg(&[a, b]);
        self.push("cosine_rows", Matrix::column(&out), Op::CosineRows(a, b), rg)
    }

    /// Row-wise inner product, `n x k, n x k -> n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("row_dot", va, vb));
        }
        let out: Vec<f64> = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let rg = self.rg(&[a, b]);
        self.push("row_dot", Matrix::column(&out), Op::RowDot(a, b), rg)
    }

    /// `out[r] = a[idx[r]]`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.rows()) {
            return Err(TensorError::Contract(format!(
                "gather_rows index {bad} out of range for {} rows",
                va.rows()
            )));
        }
        let out = va.select_rows(&idx);
        let rg = self.rg(&[a]);
        self.push("gather_rows", out, Op::GatherRows(a, idx), rg)
    }

    /// `out[idx[r]] += a[r]` into an `n`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<Vec<usize>>, n: usize) -> Result<Var> {
        let va = self.value(a);
        if idx.len() != va.rows() {
            return Err(TensorError::Contract(format!(
                "scatter_add_rows: {} indices for {} rows",
                idx.len(),
                va.rows()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Contract(format!(
                "scatter_add_rows target {bad} out of range for {n} rows"
            )));
        }
        let mut out = Matrix::zeros(n, va.cols());
        for (r, &t) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(t).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push("scatter_add_rows", out, Op::ScatterAddRows(a, idx), rg)
    }

    fn check_segments(&self, name: &'static str, a: Var, seg: &Segments) -> Result<()> {
        let va = self.value(a);
        if va.cols() != 1 || va.rows() != seg.len() {
            return Err(TensorError::Shape {
                op: name,
                left: va.shape(),
                right: (seg.len(), 1),
            });
        }
        Ok(())
    }

    fn segment_max_and_sum(values: &[f64], seg: &Segments) -> (Vec<f64>, Vec<f64>) {
        let mut max = vec![f64::NEG_INFINITY; seg.count()];
        for (&v, &s) in values.iter().zip(seg.ids()) {
            max[s] = max[s].max(v);
        }
        let mut total = vec![0.0; seg.count()];
        for (&v, &s) in values.iter().zip(seg.ids()) {
            total[s] += (v - max[s]).exp();
        }
        (max, total)
    }

    /// Softmax of an `e x 1` column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var> {
        self.check_segments("segment_softmax", a, &seg)?;
        let values = self.value(a).data();
        let (max, total) = Self::segment_max_and_sum(values, &seg);
        let out: Vec<f64> = values
            .iter()
            .zip(seg.ids())
            .map(|(&v, &s)| (v - max[s]).exp() / total[s])
            .collect();
        let rg = self.rg(&[a]);
        self.push("segment_softmax", Matrix::column(&out), Op::SegmentSoftmax(a, seg), rg)
    }

    pub fn segment_log_softmax(&mut self, a: Var, seg: Rc<Segments>) -> Result<Var> {
        self.check_segments("segment_log_softmax", a, &seg)?;
        let values = self.value(a).data();
        let (max, total) = Self::segment_max_and_sum(values, &seg);
        let out: Vec<f64> = values
            .iter()
            .zip(seg.ids())
            .map(|(&v, &s)| v - max[s] - total[s].ln())
            .collect();
        let rg = self.rg(&[a]);
        self.push(
            "segment_log_softmax",
            Matrix::column(&out),
            Op::SegmentLogSoftmax(a, seg),
            rg,
        )
    }

    /// Constant sparse operator applied on the left.
    pub fn spmm(&mut self, op: Rc<SparseOperator>, x: Var) -> Result<Var> {
        let out = op.matrix().mul_dense(self.value(x))?;
        let rg = self.rg(&[x]);
        self.push("spmm", out, Op::Spmm(op, x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::Contract(format!(
                "backward needs a 1x1 loss, got {shape:?}"
            )));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], gemm(g, false, self.value(*b), true)?);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], gemm(self.value(*a), true, g, false)?);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.zip_map(self.value(*b), |x, y| x * y));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRowVector(a, row) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if wants(row) {
                    let mut col_sum = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in col_sum.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[row.0], col_sum);
                }
            }
            Op::MulColumn(a, c) => {
                let (va, vc) = (self.value(*a), self.value(*c));
                if wants(a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let s = vc.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if wants(c) {
                    let dc: Vec<f64> = (0..g.rows()).map(|r| dot(g.row(r), va.row(r))).collect();
                    accumulate(&mut grads[c.0], Matrix::column(&dc));
                }
            }
            Op::Scale(a, s) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.map(|x| x * s));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if wants(p) {
                        let mut dp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(&mut grads[p.0], dp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (h, w) = self.value(*p).shape();
                    if wants(p) {
                        let dp = Matrix::from_vec(h, w, g.data()[off * w..(off + h) * w].to_vec())?;
                        accumulate(&mut grads[p.0], dp);
                    }
                    off += h;
                }
            }
            Op::SliceCols(a, start) => {
                if wants(a) {
                    let mut da = Matrix::zeros(g.rows(), self.value(*a).cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Softmax(a) => {
                if wants(a) {
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let inner = dot(gr, yr);
                        for ((d, gi), yi) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::LogSoftmax(a) => {
                if wants(a) {
                    let mut da = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((d, gi), yi) in da.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *d = gi - yi.exp() * total;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
            }
            Op::LeakyRelu(a, slope) => {
                if wants(a) {
                    let x = self.value(*a);
                    let s = *slope;
                    accumulate(&mut grads[a.0], g.zip_map(x, |gi, xi| if xi > 0.0 { gi } else { s * gi }));
                }
            }
            Op::Elu(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    let local = x.zip_map(y, |xi, yi| if xi > 0.0 { 1.0 } else { yi + 1.0 });
                    accumulate(&mut grads[a.0], g.zip_map(&local, |gi, li| gi * li));
                }
            }
            Op::Tanh(a) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)));
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)));
                }
            }
            Op::Softplus(a) => {
                if wants(a) {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], g.zip_map(x, |gi, xi| gi * sigmoid(xi)));
                }
            }
            Op::Dropout(a, mask) => {
                if wants(a) {
                    let da = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(mask.iter()).map(|(x, m)| x * m).collect(),
                    )?;
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::MeanRows(a) => {
                if wants(a) {
                    let n = self.value(*a).rows();
                    let row: Vec<f64> = g.data().iter().map(|x| x / n as f64).collect();
                    let mut data = Vec::with_capacity(n * row.len());
                    for _ in 0..n {
                        data.extend_from_slice(&row);
                    }
                    accumulate(&mut grads[a.0], Matrix::from_vec(n, row.len(), data)?);
                }
            }
            Op::BroadcastRows(a) => {
                if wants(a) {
                    let mut da = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in da.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads[a.0], Matrix::filled(r, c, g.item()));
                }
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (rows, cols) = va.shape();
                let mut da = Matrix::zeros(rows, cols);
                let mut db = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let (ar, br) = (va.row(r), vb.row(r));
                    let (na, nb) = (norm(ar), norm(br));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for j in 0..cols {
                        da.row_mut(r)[j] = gr * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        db.row_mut(r)[j] = gr * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                    }
                }
                if wants(a) {
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let mut da = vb.clone();
                    for r in 0..da.rows() {
                        let s = g.get(r, 0);
                        da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                if wants(b) {
                    let mut db = va.clone();
                    for r in 0..db.rows() {
                        let s = g.get(r, 0);
                        db.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::GatherRows(a, idx) => {
                if wants(a) {
                    let mut da = Matrix::zeros(self.value(*a).rows(), g.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, x) in da.row_mut(src).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
            }
            Op::ScatterAddRows(a, idx) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], g.select_rows(idx));
                }
            }
            Op::SegmentSoftmax(a, seg) => {
                if wants(a) {
                    let mut inner = vec![0.0; seg.count()];
                    for ((gi, yi), &s) in g.data().iter().zip(y.data()).zip(seg.ids()) {
                        inner[s] += gi * yi;
                    }
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(seg.ids())
                        .map(|((gi, yi), &s)| yi * (gi - inner[s]))
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::column(&da));
                }
            }
            Op::SegmentLogSoftmax(a, seg) => {
                if wants(a) {
                    let mut total = vec![0.0; seg.count()];
                    for (gi, &s) in g.data().iter().zip(seg.ids()) {
                        total[s] += gi;
                    }
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(seg.ids())
                        .map(|((gi, yi), &s)| gi - yi.exp() * total[s])
                        .collect();
                    accumulate(&mut grads[a.0], Matrix::column(&da));
                }
            }
            Op::Spmm(op, x) => {
                if wants(x) {
                    accumulate(&mut grads[x.0], op.transposed().mul_dense(g)?);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 2)).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn orthogonal_cosine_is_zero_and_zero_vector_is_zero() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap()).unwrap();
        let b = t.constant(Matrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap()).unwrap();
        let c = t.cosine_rows(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn disconnected_param_has_no_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0)).unwrap();
        let unused = t.param(Matrix::scalar(1.0)).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.param(Matrix::zeros(2, 1)).unwrap();
        assert!(matches!(t.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_leaf_is_rejected() {
        let mut t = Tape::new();
        assert_eq!(
            t.constant(Matrix::scalar(f64::NAN)).unwrap_err(),
            TensorError::NonFinite { op: "constant" }
        );
    }

    #[test]
    fn shape_mismatch_is_typed() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 2)).unwrap();
        let b = t.constant(Matrix::zeros(3, 2)).unwrap();
        assert!(matches!(t.add(a, b), Err(TensorError::Shape { op: "add", .. })));
        assert!(matches!(t.matmul(a, b), Err(TensorError::Shape { op: "matmul", .. })));
    }

    #[test]
    fn dropout_eval_is_identity_and_rate_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(3, 3, 2.0)).unwrap();
        assert_eq!(t.dropout(a, 0.5, false, &mut rng).unwrap(), a);
        assert!(t.dropout(a, 1.0, true, &mut rng).is_err());
        let d = t.dropout(a, 0.5, true, &mut rng).unwrap();
        assert!(t.value(d).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn segment_softmax_normalizes_each_group() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::column(&[1.0, 0.0, 5.0, 2.0, 2.0])).unwrap();
        let seg = Rc::new(Segments::new(vec![0, 0, 1, 2, 2], 3).unwrap());
        let s = t.segment_softmax(a, seg.clone()).unwrap();
        let v = t.value(s).data().to_vec();
        assert_abs_diff_eq!(v[0], 0.7310585786300049, epsilon = 1e-12);
        assert_abs_diff_eq!(v[0] + v[1], 1.0, epsilon = 1e-12);
        assert_eq!(v[2], 1.0);
        assert_abs_diff_eq!(v[3], 0.5, epsilon = 1e-12);
        let l = t.segment_log_softmax(a, seg).unwrap();
        for (x, y) in t.value(l).data().iter().zip(&v) {
            assert_abs_diff_eq!(x.exp(), y, epsilon = 1e-12);
        }
    }
}
