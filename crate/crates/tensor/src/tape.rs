use std::collections::{BTreeMap, HashMap};

use crate::tensor::{matmul_nt_into, matmul_tn_into};
use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
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
    Param { store: u64, id: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    ClampMax(Var, f64),
    ClampMin(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<(u64, usize), Var>,
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<(u64, usize), Vec<f64>>,
    leaves: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.leaves.get(&v.0).map(|g| g.as_slice())
    }

    /// Gradient of a parameter, if it was reachable from the loss.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&(store.uid(), id.index()))
            .map(|g| g.as_slice())
    }

    pub(crate) fn params_of(&self, store: u64) -> impl Iterator<Item = (usize, &[f64])> {
        self.params
            .range((store, 0)..=(store, usize::MAX))
            .map(|(&(_, id), g)| (id, g.as_slice()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// parameter return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let requires_grad = !store.is_frozen();
        let v = self.push(
            store.get(id).clone(),
            Op::Param {
                store: key.0,
                id: key.1,
            },
            requires_grad,
        );
        self.param_nodes.insert(key, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.rows(), ta.cols(), data).expect("shape checked");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(TensorError::Shape {
                op: "add_row",
                left: sa,
                right: sr,
            });
        }
        let r = self.value(row).data().to_vec();
        let mut value = self.value(a).clone();
        for chunk in value.data_mut().chunks_mut(sa.1.max(1)) {
            chunk.iter_mut().zip(&r).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Scales row `i` of an `m x n` matrix by entry `i` of an `m x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc.1 != 1 || sc.0 != sa.0 {
            return Err(TensorError::Shape {
                op: "mul_col",
                left: sa,
                right: sc,
            });
        }
        let c = self.value(col).data().to_vec();
        let mut value = self.value(a).clone();
        if sa.1 > 0 {
            for (chunk, s) in value.data_mut().chunks_mut(sa.1).zip(&c) {
                chunk.iter_mut().for_each(|x| *x *= s);
            }
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(value, Op::MulCol(a, col), rg))
    }

    /// Multiplies every entry by a `1 x 1` node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(TensorError::Shape {
                op: "scale_by",
                left: self.shape(a),
                right: self.shape(s),
            });
        }
        let k = self.item(s);
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::ScaleBy(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Elementwise `min(a, limit)`; gradient flows where `a < limit`.
    pub fn clamp_max(&mut self, a: Var, limit: f64) -> Var {
        self.unary(a, Op::ClampMax(a, limit), |x| x.min(limit))
    }

    /// Elementwise `max(a, floor)`; gradient flows where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(TensorError::Empty { op: "softmax" });
        }
        let mut value = Tensor::zeros(t.rows(), t.cols());
        let cols = t.cols();
        for (r, out) in value.data_mut().chunks_mut(cols).enumerate() {
            softmax_row(t.row_slice(r), out);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(TensorError::Empty { op: "log_softmax" });
        }
        let cols = t.cols();
        let mut value = Tensor::zeros(t.rows(), cols);
        for (r, out) in value.data_mut().chunks_mut(cols).enumerate() {
            let row = t.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.iter_mut().zip(row).for_each(|(o, x)| *o = x - lse);
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(TensorError::Empty { op: "mean" });
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for r in 0..t.rows() {
            out.iter_mut()
                .zip(t.row_slice(r))
                .for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(a);
        self.push(Tensor::row(out), Op::SumRows(a), rg)
    }

    /// Column means: `m x n -> 1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.shape(a).0;
        if m == 0 {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let s = self.sum_rows(a);
        Ok(self.scale(s, 1.0 / m as f64))
    }

    /// Column maxima: `m x n -> 1 x n`.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rows() == 0 {
            return Err(TensorError::Empty { op: "max_rows" });
        }
        let mut out = t.row_slice(0).to_vec();
        let mut arg = vec![0usize; t.cols()];
        for r in 1..t.rows() {
            for (c, &x) in t.row_slice(r).iter().enumerate() {
                if x > out[c] {
                    out[c] = x;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::row(out), Op::MaxRows(a, arg), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                extent: t.rows(),
            });
        }
        let c = t.cols();
        let value = Tensor::new(end - start, c, t.data()[start * c..end * c].to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Result<Var> {
        self.slice_rows(a, r, r + 1)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                extent: t.cols(),
            });
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        let value = Tensor::new(t.rows(), end - start, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    /// Element `(r, c)` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let row = self.slice_rows(a, r, r + 1)?;
        self.slice_cols(row, c, c + 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.shape(first).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_rows" })?;
        let cols = self.shape(first).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: self.shape(first),
                    right: self.shape(p),
                });
            }
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let value = Tensor::new(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let c = t.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= t.rows() {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: t.rows(),
                });
            }
            data.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(ids.len(), c, data)?;
        let rg = self.rg(table);
        Ok(self.push(value, Op::Gather(table, ids.to_vec()), rg))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            macro_rules! acc {
                ($v:expr, $len:expr, |$buf:ident| $body:block) => {{
                    let v: Var = $v;
                    if rg(v) {
                        let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; $len]);
                        $body
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param { store, id } => {
                    out.params.insert((*store, *id), g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    acc!(*a, m * k, |buf| {
                        matmul_nt_into(&g, tb.data(), buf, m, k, n);
                    });
                    acc!(*b, k * n, |buf| {
                        matmul_tn_into(ta.data(), &g, buf, m, k, n);
                    });
                }
                Op::Add(a, b) => {
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    });
                    acc!(*b, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    });
                }
                Op::Sub(a, b) => {
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    });
                    acc!(*b, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o -= x);
                    });
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (val(*a), val(*b));
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(&g).zip(tb.data()) {
                            *o += x * y;
                        }
                    });
                    acc!(*b, g.len(), |buf| {
                        for ((o, x), y) in buf.iter_mut().zip(&g).zip(ta.data()) {
                            *o += x * y;
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    let n = val(*row).cols();
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    });
                    acc!(*row, n, |buf| {
                        for chunk in g.chunks(n.max(1)) {
                            buf.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                        }
                    });
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (val(*a), val(*col));
                    let n = ta.cols();
                    acc!(*a, g.len(), |buf| {
                        if n > 0 {
                            for ((bc, gc), s) in buf.chunks_mut(n).zip(g.chunks(n)).zip(tc.data()) {
                                bc.iter_mut().zip(gc).for_each(|(o, x)| *o += x * s);
                            }
                        }
                    });
                    acc!(*col, tc.len(), |buf| {
                        if n > 0 {
                            for (r, (gc, ac)) in g.chunks(n).zip(ta.data().chunks(n)).enumerate() {
                                buf[r] += gc.iter().zip(ac).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                Op::ScaleBy(a, s) => {
                    let k = val(*s).item();
                    let ta = val(*a);
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x * k);
                    });
                    acc!(*s, 1, |buf| {
                        buf[0] += g.iter().zip(ta.data()).map(|(x, y)| x * y).sum::<f64>();
                    });
                }
                Op::Scale(a, k) => {
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x * k);
                    });
                }
                Op::AddScalar(a) => {
                    acc!(*a, g.len(), |buf| {
                        buf.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                    });
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), s) in buf.iter_mut().zip(&g).zip(y) {
                            *o += x * s * (1.0 - s);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), t) in buf.iter_mut().zip(&g).zip(y) {
                            *o += x * (1.0 - t * t);
                        }
                    });
                }
                Op::Relu(a) => {
                    let xs = val(*a).data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), v) in buf.iter_mut().zip(&g).zip(xs) {
                            if *v > 0.0 {
                                *o += x;
                            }
                        }
                    });
                }
                Op::ClampMax(a, limit) => {
                    let xs = val(*a).data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), v) in buf.iter_mut().zip(&g).zip(xs) {
                            if *v < *limit {
                                *o += x;
                            }
                        }
                    });
                }
                Op::ClampMin(a, floor) => {
                    let xs = val(*a).data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), v) in buf.iter_mut().zip(&g).zip(xs) {
                            if *v > *floor {
                                *o += x;
                            }
                        }
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), e) in buf.iter_mut().zip(&g).zip(y) {
                            *o += x * e;
                        }
                    });
                }
                Op::Log(a) => {
                    let xs = val(*a).data();
                    acc!(*a, g.len(), |buf| {
                        for ((o, x), v) in buf.iter_mut().zip(&g).zip(xs) {
                            *o += x / v;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    acc!(*a, g.len(), |buf| {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                            for c in 0..n {
                                buf[r * n + c] += yr[c] * (gr[c] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    acc!(*a, g.len(), |buf| {
                        for r in 0..y.rows() {
                            let yr = y.row_slice(r);
                            let gr = &g[r * n..(r + 1) * n];
                            let total: f64 = gr.iter().sum();
                            for c in 0..n {
                                buf[r * n + c] += gr[c] - yr[c].exp() * total;
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    let len = val(*a).len();
                    acc!(*a, len, |buf| {
                        buf.iter_mut().for_each(|o| *o += g[0]);
                    });
                }
                Op::Mean(a) => {
                    let len = val(*a).len();
                    acc!(*a, len, |buf| {
                        let k = g[0] / len as f64;
                        buf.iter_mut().for_each(|o| *o += k);
                    });
                }
                Op::SumRows(a) => {
                    let len = val(*a).len();
                    let n = g.len();
                    acc!(*a, len, |buf| {
                        if n > 0 {
                            for chunk in buf.chunks_mut(n) {
                                chunk.iter_mut().zip(&g).for_each(|(o, x)| *o += x);
                            }
                        }
                    });
                }
                Op::MaxRows(a, arg) => {
                    let ta = val(*a);
                    let n = ta.cols();
                    acc!(*a, ta.len(), |buf| {
                        for (c, &r) in arg.iter().enumerate() {
                            buf[r * n + c] += g[c];
                        }
                    });
                }
                Op::SliceRows(a, start) => {
                    let ta = val(*a);
                    let n = ta.cols();
                    acc!(*a, ta.len(), |buf| {
                        let off = start * n;
                        buf[off..off + g.len()]
                            .iter_mut()
                            .zip(&g)
                            .for_each(|(o, x)| *o += x);
                    });
                }
                Op::SliceCols(a, start) => {
                    let ta = val(*a);
                    let n = ta.cols();
                    let w = node.value.cols();
                    acc!(*a, ta.len(), |buf| {
                        if w > 0 {
                            for (r, gc) in g.chunks(w).enumerate() {
                                let off = r * n + start;
                                buf[off..off + w]
                                    .iter_mut()
                                    .zip(gc)
                                    .for_each(|(o, x)| *o += x);
                            }
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for &p in parts {
                        let tp = val(p);
                        let w = tp.cols();
                        acc!(p, tp.len(), |buf| {
                            for r in 0..tp.rows() {
                                let src = &g[r * total + off..r * total + off + w];
                                buf[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(o, x)| *o += x);
                            }
                        });
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).len();
                        acc!(p, len, |buf| {
                            buf.iter_mut()
                                .zip(&g[off..off + len])
                                .for_each(|(o, x)| *o += x);
                        });
                        off += len;
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = node.value.shape();
                    acc!(*a, g.len(), |buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Gather(table, ids) => {
                    let tt = val(*table);
                    let n = tt.cols();
                    acc!(*table, tt.len(), |buf| {
                        for (k, &id) in ids.iter().enumerate() {
                            buf[id * n..(id + 1) * n]
                                .iter_mut()
                                .zip(&g[k * n..(k + 1) * n])
                                .for_each(|(o, x)| *o += x);
                        }
                    });
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.item(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1000.0, 999.0, -1000.0]));
        let y = t.softmax(x).unwrap();
        assert!(t.value(y).is_finite());
        let s: f64 = t.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matmul_shapes_and_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(3, 4));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), (2, 4));
        let err = t.matmul(b, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("(3, 4)"));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0, 3.0]), true);
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]), true);
        let err = t.backward(x).unwrap_err();
        assert_eq!(err, TensorError::NonScalarLoss((1, 2)));
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::row(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::row(vec![3.0]));
        store.zero_grad();
        let mut t = Tape::new();
        let u = t.param(&store, used);
        let _ = t.param(&store, unused);
        let loss = t.sum(u);
        let g = t.backward(loss).unwrap();
        assert!(g.param(&store, unused).is_none());
        store.accumulate(&g);
        assert_eq!(store.param(unused).grad.as_deref(), Some(&[0.0][..]));
        assert_eq!(store.param(used).grad.as_deref(), Some(&[1.0, 1.0][..]));
    }

    #[test]
    fn shared_parameter_resolves_to_one_node() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let y = t.mul(a, b).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.param(&store, w).unwrap(), &[6.0]);
    }

    #[test]
    fn frozen_store_enters_as_constant() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        store.freeze();
        let mut t = Tape::new();
        let a = t.param(&store, w);
        assert!(!t.requires_grad(a));
    }
}
