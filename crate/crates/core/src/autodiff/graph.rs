use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowSlice { x: Var, start: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddScalar(Var),
    GradReverse(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::RowSlice { .. } => "row_slice",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::GradReverse(..) => "gradient_reverse",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape for reverse-mode differentiation.
///
/// Every op evaluates eagerly and appends a node, so node indices are already
/// a topological order. A graph is meant to be built for one training step and
/// dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(t, Op::Leaf, requires_grad))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward output with respect to `v`. Nodes the
    /// output does not depend on report zeros.
    pub fn grad(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; value.numel()]);
        Tensor::new(value.shape().to_vec(), data).expect("gradient matches value shape")
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
                vec![*a, *b]
            }
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Log(x)
            | Op::Clamp { x, .. }
            | Op::RowSlice { x, .. }
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::GradReverse(x, _) => vec![*x],
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.dims2().ok_or_else(|| Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.record(out, op)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())?;
        self.record(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_data(self.value(a).data(), self.value(b).data(), m, k, n);
        self.record(Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    /// Adds a `1 × C` bias row to every row of an `R × C` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "add_row")?;
        let tb = self.value(bias);
        if tb.dims2() != Some((1, c)) {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: vec![r, c],
                right: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.record(Tensor::matrix(r, c, data)?, Op::AddRow(a, bias))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    /// Natural log; non-positive inputs yield a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping engaged.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat_cols".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.record(Tensor::matrix(rows, total, data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Empty("concat_rows".into()))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(first).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.record(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start + len`.
    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "row_slice")?;
        if len == 0 || start + len > r {
            return Err(Error::ShapeMismatch {
                op: "row_slice",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.record(Tensor::matrix(len, c, data)?, Op::RowSlice { x, start })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.dims2(x, "softmax")?;
        let out = super::tensor::softmax_rowwise(self.value(x))?;
        self.record(out, Op::Softmax(x))
    }

    /// Row-wise log-softmax, `x - logsumexp(x)` per row.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "log_softmax")?;
        let t = self.value(x);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        self.record(Tensor::matrix(r, c, data)?, Op::LogSoftmax(x))
    }

    /// Sum of all elements as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(x))
    }

    /// Mean of all elements as a `1 × 1` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.record(Tensor::scalar(s), Op::Mean(x))
    }

    /// Identity on the forward pass; multiplies the upstream gradient by
    /// `-lambda` on the backward pass.
    pub fn gradient_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() || lambda <= 0.0 {
            return Err(Error::InvalidLambda(lambda));
        }
        let out = self.value(x).clone();
        self.record(out, Op::GradReverse(x, lambda))
    }

    /// Populates gradients of the scalar `output` with respect to every node
    /// that requires one. May run at most once per graph.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn accumulate_from(&mut self, v: Var, src: &[f64], factor: f64) {
        self.accumulate(v, |acc| {
            for (a, s) in acc.iter_mut().zip(src) {
                *a += factor * s;
            }
        });
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_from(a, g, 1.0);
                self.accumulate_from(b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate_from(a, g, 1.0);
                self.accumulate_from(b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let va = self.value(a).data().to_vec();
                let vb = self.value(b).data().to_vec();
                self.accumulate(a, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g).zip(&vb) {
                        *x += gi * y;
                    }
                });
                self.accumulate(b, |acc| {
                    for ((x, gi), y) in acc.iter_mut().zip(g).zip(&va) {
                        *x += gi * y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matrix");
                let n = self.value(b).cols();
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bv = self.value(b).data().to_vec();
                    self.accumulate(a, |acc| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for j in 0..k {
                                let brow = &bv[j * n..(j + 1) * n];
                                let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                                acc[r * k + j] += dot;
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let av = self.value(a).data().to_vec();
                    self.accumulate(b, |acc| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for j in 0..k {
                                let x = av[r * k + j];
                                if x == 0.0 {
                                    continue;
                                }
                                let arow = &mut acc[j * n..(j + 1) * n];
                                for (o, gv) in arow.iter_mut().zip(grow) {
                                    *o += x * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate_from(a, g, 1.0);
                let c = self.value(bias).numel();
                self.accumulate(bias, |acc| {
                    for row in g.chunks(c) {
                        for (o, gv) in acc.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(x, |acc| {
                    for ((o, gv), yv) in acc.iter_mut().zip(g).zip(&y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.accumulate(x, |acc| {
                    for ((o, gv), yv) in acc.iter_mut().zip(g).zip(&y) {
                        *o += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Log(x) => {
                let xv = self.value(x).data().to_vec();
                self.accumulate(x, |acc| {
                    for ((o, gv), v) in acc.iter_mut().zip(g).zip(&xv) {
                        *o += gv / v;
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(x).data().to_vec();
                self.accumulate(x, |acc| {
                    for ((o, gv), v) in acc.iter_mut().zip(g).zip(&xv) {
                        if *v >= lo && *v <= hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(p, |acc| {
                        for (r, row) in g.chunks(total).enumerate() {
                            for (o, gv) in acc[r * w..(r + 1) * w].iter_mut().zip(&row[offset..offset + w]) {
                                *o += gv;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(p).numel();
                    self.accumulate_from(p, &g[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::RowSlice { x, start } => {
                let c = self.value(x).cols();
                self.accumulate(x, |acc| {
                    for (o, gv) in acc[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.clone();
                let c = y.cols();
                self.accumulate(x, |acc| {
                    for ((orow, grow), yrow) in acc.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[i].value.clone();
                let c = y.cols();
                self.accumulate(x, |acc| {
                    for ((orow, grow), yrow) in acc.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((o, gv), yv) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let gv = g[0];
                self.accumulate(x, |acc| acc.iter_mut().for_each(|o| *o += gv));
            }
            Op::Mean(x) => {
                let gv = g[0] / self.value(x).numel() as f64;
                self.accumulate(x, |acc| acc.iter_mut().for_each(|o| *o += gv));
            }
            Op::Scale(x, c) => self.accumulate_from(x, g, c),
            Op::AddScalar(x) => self.accumulate_from(x, g, 1.0),
            Op::GradReverse(x, lambda) => self.accumulate_from(x, g, -lambda),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_data(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}
