use std::sync::Arc;

use rand::Rng;

use super::tensor::{matmul_nt_into, matmul_tn_into};
use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction/normalization axis of a rank-2 tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Down each column (over the row index).
    Rows,
    /// Along each row (over the column index).
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Unary(Var, Unary),
    Softmax(Var, Axis),
    LogSoftmax(Var, Axis),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SelectCols(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    LayerNorm {
        input: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Pick(Var, usize),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are appended in execution order, so the node
/// vector is already a topological order and backward is a reverse sweep.
///
/// A graph is single-threaded. Leaf values are reference counted so that
/// parameters can be bound without copying.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_str(t: &Tensor) -> String {
    format!("[{}, {}]", t.rows(), t.cols())
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// New leaf holding the same value as `v` but cut off from its history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    fn push_raw(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        let requires_grad = self.inputs_require_grad(&op);
        Ok(self.push_raw(Arc::new(value), op, requires_grad))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(rg),
            Op::Transpose(a)
            | Op::Affine(a, _)
            | Op::Unary(a, _)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::SliceRows(a, _)
            | Op::SelectCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Pick(a, _) => rg(a),
            Op::LayerNorm { input, .. } => rg(input),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a), "transpose")
    }

    fn broadcast_check(&self, a: Var, b: Var, name: &str) -> Result<(), NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let rows_ok = tb.rows() == ta.rows() || tb.rows() == 1;
        let cols_ok = tb.cols() == ta.cols() || tb.cols() == 1;
        if rows_ok && cols_ok {
            Ok(())
        } else {
            Err(NumericsError::Shape(format!(
                "{name}: cannot broadcast {} onto {}",
                shape_str(tb),
                shape_str(ta)
            )))
        }
    }

    fn broadcast_apply(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = Tensor::zeros(r, c);
        let data = out.data_mut();
        for i in 0..r {
            let bi = if tb.rows() == 1 { 0 } else { i };
            for j in 0..c {
                let bj = if tb.cols() == 1 { 0 } else { j };
                data[i * c + j] = f(ta.get(i, j), tb.get(bi, bj));
            }
        }
        out
    }

    /// `a + b`, where `b` may broadcast along either axis of size 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.broadcast_check(a, b, "add")?;
        let out = self.broadcast_apply(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    /// Elementwise `a * b`, with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.broadcast_check(a, b, "mul")?;
        let out = self.broadcast_apply(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| scale * x + shift).collect();
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        self.push(out, Op::Affine(a, scale), "affine")
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, NumericsError> {
        self.affine(a, scale, 0.0)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = t.data().iter().find(|x| **x <= 0.0) {
                return Err(NumericsError::Domain(format!(
                    "log of non-positive value {bad}"
                )));
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Gelu => gelu,
            Unary::Log => f64::ln,
        };
        let data = t.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(t.rows(), t.cols(), data)?;
        let name = match kind {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Log => "log",
        };
        self.push(out, Op::Unary(a, kind), name)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Gelu)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Unary::Log)
    }

    fn axis_lanes(t: &Tensor, axis: Axis) -> (usize, usize, usize, usize) {
        // (lane count, lane length, stride between lanes, stride within lane)
        match axis {
            Axis::Cols => (t.rows(), t.cols(), t.cols(), 1),
            Axis::Rows => (t.cols(), t.rows(), 1, t.cols()),
        }
    }

    fn softmax_impl(t: &Tensor, axis: Axis, log: bool) -> Result<Tensor, NumericsError> {
        let (lanes, len, lane_stride, step) = Self::axis_lanes(t, axis);
        if len == 0 {
            return Err(NumericsError::Shape(format!(
                "softmax over empty axis {axis:?} of {}",
                shape_str(t)
            )));
        }
        let mut out = t.clone();
        let data = out.data_mut();
        for lane in 0..lanes {
            let base = lane * lane_stride;
            let idx = |k: usize| base + k * step;
            let max = (0..len).map(|k| data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                z += (data[idx(k)] - max).exp();
            }
            let log_z = z.ln();
            for k in 0..len {
                let shifted = data[idx(k)] - max;
                data[idx(k)] = if log {
                    shifted - log_z
                } else {
                    shifted.exp() / z
                };
            }
        }
        Ok(out)
    }

    /// Softmax with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        let out = Self::softmax_impl(self.value(a), axis, false)?;
        self.push(out, Op::Softmax(a, axis), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        let out = Self::softmax_impl(self.value(a), axis, true)?;
        self.push(out, Op::LogSoftmax(a, axis), "log_softmax")
    }

    /// Stacks `parts` vertically in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat_rows of zero parts".into()))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != cols {
                return Err(NumericsError::Shape(format!(
                    "concat_rows: column mismatch {} vs {}",
                    shape_str(self.value(*first)),
                    shape_str(t)
                )));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Places `parts` side by side in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat_cols of zero parts".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(NumericsError::Shape(format!(
                    "concat_cols: row mismatch {} vs {}",
                    shape_str(self.value(*first)),
                    shape_str(t)
                )));
            }
            total += t.cols();
        }
        let mut out = Tensor::zeros(rows, total);
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            for r in 0..rows {
                for c in 0..t.cols() {
                    out.set(r, offset + c, t.get(r, c));
                }
            }
            offset += t.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(NumericsError::Index(format!(
                "slice_rows {start}..{end} of {}",
                shape_str(t)
            )));
        }
        let out = t.slice_rows(start, end);
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    /// Columns of `a` at `cols`, in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if let Some(bad) = cols.iter().find(|c| **c >= t.cols()) {
            return Err(NumericsError::Index(format!(
                "column {bad} out of range for {}",
                shape_str(t)
            )));
        }
        let mut out = Tensor::zeros(t.rows(), cols.len());
        for r in 0..t.rows() {
            for (j, &c) in cols.iter().enumerate() {
                out.set(r, j, t.get(r, c));
            }
        }
        self.push(out, Op::SelectCols(a, cols.to_vec()), "select_cols")
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i` of the output.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(table);
        if let Some(bad) = ids.iter().find(|i| **i >= t.rows()) {
            return Err(NumericsError::Index(format!(
                "row id {bad} out of range for table {}",
                shape_str(t)
            )));
        }
        let d = t.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(ids.len(), d, data)?;
        self.push(out, Op::GatherRows(table, ids.to_vec()), "gather_rows")
    }

    /// Normalizes every column to zero mean and unit variance (no affine part).
    pub fn layer_norm_cols(&mut self, a: Var, eps: f64) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if r == 0 {
            return Err(NumericsError::Shape("layer_norm over zero features".into()));
        }
        let mut out = Tensor::zeros(r, c);
        let mut inv_std = vec![0.0; c];
        for j in 0..c {
            let mean = (0..r).map(|i| t.get(i, j)).sum::<f64>() / r as f64;
            let var = (0..r).map(|i| (t.get(i, j) - mean).powi(2)).sum::<f64>() / r as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[j] = s;
            for i in 0..r {
                out.set(i, j, (t.get(i, j) - mean) * s);
            }
        }
        let normalized = out.data().to_vec();
        self.push(
            out,
            Op::LayerNorm {
                input: a,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(NumericsError::Shape("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// The scalar at `(row, col)`.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if row >= t.rows() || col >= t.cols() {
            return Err(NumericsError::Index(format!(
                "pick ({row}, {col}) out of range for {}",
                shape_str(t)
            )));
        }
        let flat = row * t.cols() + col;
        let out = Tensor::scalar(t.data()[flat]);
        self.push(out, Op::Pick(a, flat), "pick")
    }

    /// Inverted dropout. Identity when `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var, NumericsError> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(NumericsError::Domain(format!("dropout rate {rate} >= 1")));
        }
        let t = self.value(a);
        let keep = 1.0 - rate;
        let data = (0..t.len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::new(t.rows(), t.cols(), data)?;
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and lies upstream of `loss` receives `dloss/dnode`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.backward_done {
            return Err(NumericsError::Graph(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar loss, got {}",
                shape_str(self.value(loss))
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Adds into a target gradient in place through a closure, allocating
    /// a zero buffer on first touch.
    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        target: Var,
        f: impl FnOnce(&mut Tensor),
    ) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let t = self.value(target);
        let slot = &mut grads[target.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(t.rows(), t.cols()));
        }
        if let Some(g) = slot {
            f(g);
        }
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, n, p) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC * B^T, dB = A^T * dC
                self.accumulate_with(grads, *a, |g| {
                    matmul_nt_into(grad.data(), tb.data(), g.data_mut(), m, p, n)
                });
                self.accumulate_with(grads, *b, |g| {
                    matmul_tn_into(ta.data(), grad.data(), g.data_mut(), m, n, p)
                });
            }
            Op::Transpose(a) => self.accumulate(grads, *a, grad.transposed()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, grad.clone());
                let tb = self.value(*b);
                self.accumulate(grads, *b, reduce_to(grad, tb.rows(), tb.cols()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = (ta.rows(), ta.cols());
                if self.nodes[a.0].requires_grad {
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let bi = if tb.rows() == 1 { 0 } else { i };
                        for j in 0..c {
                            let bj = if tb.cols() == 1 { 0 } else { j };
                            ga.set(i, j, grad.get(i, j) * tb.get(bi, bj));
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut full = Tensor::zeros(r, c);
                    for (o, (g, x)) in full
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data().iter().zip(ta.data()))
                    {
                        *o = g * x;
                    }
                    self.accumulate(grads, *b, reduce_to(&full, tb.rows(), tb.cols()));
                }
            }
            Op::Affine(a, scale) => {
                let mut g = grad.clone();
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *a, g);
            }
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let mut g = grad.clone();
                for ((gv, xv), yv) in g.data_mut().iter_mut().zip(x.data()).zip(out.data()) {
                    let local = match kind {
                        Unary::Tanh => 1.0 - yv * yv,
                        Unary::Sigmoid => yv * (1.0 - yv),
                        Unary::Gelu => gelu_grad(*xv),
                        Unary::Log => 1.0 / xv,
                    };
                    *gv *= local;
                }
                self.accumulate(grads, *a, g);
            }
            Op::Softmax(a, axis) => {
                let (lanes, len, lane_stride, step) = Self::axis_lanes(out, *axis);
                let mut g = Tensor::zeros(out.rows(), out.cols());
                let (y, gy, gx) = (out.data(), grad.data(), g.data_mut());
                for lane in 0..lanes {
                    let base = lane * lane_stride;
                    let dot: f64 = (0..len).map(|k| y[base + k * step] * gy[base + k * step]).sum();
                    for k in 0..len {
                        let i = base + k * step;
                        gx[i] = y[i] * (gy[i] - dot);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::LogSoftmax(a, axis) => {
                let (lanes, len, lane_stride, step) = Self::axis_lanes(out, *axis);
                let mut g = Tensor::zeros(out.rows(), out.cols());
                let (y, gy, gx) = (out.data(), grad.data(), g.data_mut());
                for lane in 0..lanes {
                    let base = lane * lane_stride;
                    let total: f64 = (0..len).map(|k| gy[base + k * step]).sum();
                    for k in 0..len {
                        let i = base + k * step;
                        gx[i] = gy[i] - y[i].exp() * total;
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    if self.nodes[p.0].requires_grad {
                        self.accumulate(grads, *p, grad.slice_rows(row, row + rows));
                    }
                    row += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let t = self.value(*p);
                    let cols = t.cols();
                    if self.nodes[p.0].requires_grad {
                        let mut g = Tensor::zeros(t.rows(), cols);
                        for r in 0..t.rows() {
                            for c in 0..cols {
                                g.set(r, c, grad.get(r, offset + c));
                            }
                        }
                        self.accumulate(grads, *p, g);
                    }
                    offset += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let start = *start;
                self.accumulate_with(grads, *a, |g| {
                    let c = g.cols();
                    let dst = &mut g.data_mut()[start * c..start * c + grad.len()];
                    for (d, s) in dst.iter_mut().zip(grad.data()) {
                        *d += s;
                    }
                });
            }
            Op::SelectCols(a, cols) => {
                self.accumulate_with(grads, *a, |g| {
                    for r in 0..grad.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            let v = g.get(r, c) + grad.get(r, j);
                            g.set(r, c, v);
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                self.accumulate_with(grads, *table, |g| {
                    let d = g.cols();
                    for (i, &id) in ids.iter().enumerate() {
                        let dst = &mut g.data_mut()[id * d..(id + 1) * d];
                        for (dv, sv) in dst.iter_mut().zip(grad.row(i)) {
                            *dv += sv;
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                normalized,
                inv_std,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let mut g = Tensor::zeros(r, c);
                let n = r as f64;
                for j in 0..c {
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for i in 0..r {
                        let gv = grad.get(i, j);
                        mean_g += gv;
                        mean_gx += gv * normalized[i * c + j];
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    for i in 0..r {
                        let xh = normalized[i * c + j];
                        g.set(i, j, inv_std[j] * (grad.get(i, j) - mean_g - xh * mean_gx));
                    }
                }
                self.accumulate(grads, *input, g);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                let s = grad.data()[0];
                self.accumulate(grads, *a, Tensor::filled(t.rows(), t.cols(), s));
            }
            Op::Pick(a, flat) => {
                let flat = *flat;
                let s = grad.data()[0];
                self.accumulate_with(grads, *a, |g| g.data_mut()[flat] += s);
            }
        }
    }
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..grad.rows() {
        let oi = if rows == 1 { 0 } else { i };
        for j in 0..grad.cols() {
            let oj = if cols == 1 { 0 } else { j };
            let v = out.get(oi, oj) + grad.get(i, j);
            out.set(oi, oj, v);
        }
    }
    out
}
