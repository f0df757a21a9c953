//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive in execution order, so the node list is
//! already topologically sorted and [`Tape::backward`] is a single reverse
//! sweep. Leaves are either trainable ([`Tape::param`]) or constant
//! ([`Tape::constant`]); gradients are only propagated through nodes that
//! depend on at least one trainable leaf.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Clamp used by the logarithms inside [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-12;
/// Smoothing term of the Dice coefficient.
pub const DICE_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-24;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fixed sparse linear map between row sets: output row `i` is
/// `sum(w * input[j])` over the `(j, w)` pairs in `rows[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMix {
    pub input_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    /// Row-mean over each index group.
    pub fn mean_groups(input_rows: usize, groups: &[Vec<usize>]) -> Result<Self> {
        let mut rows = Vec::with_capacity(groups.len());
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::contract(format!("group {g} is empty")));
            }
            let w = 1.0 / members.len() as f64;
            rows.push(members.iter().map(|&j| (j, w)).collect());
        }
        Ok(Self { input_rows, rows })
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    GatherElems(Var, Vec<(usize, usize)>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Relu(Var),
    LayerNorm(Var),
    L2Normalize(Var),
    Bce(Var, Var),
    Dice(Var, Var),
    Mix(Var, Arc<RowMix>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Gradient for `v`; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    detached: Vec<Tensor>,
    replay: Option<Vec<Tensor>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose [`Tape::detach`] calls return `values` in order instead of
    /// the live values. Finite-difference oracles use this to hold
    /// stop-gradient targets fixed while parameters are perturbed.
    pub fn with_detach_replay(values: Vec<Tensor>) -> Self {
        Self {
            replay: Some(values),
            ..Self::default()
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Values returned by every [`Tape::detach`] call so far.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let idx = self.detached.len();
        let value = match &self.replay {
            Some(values) => {
                let replayed = values
                    .get(idx)
                    .cloned()
                    .ok_or_else(|| Error::contract("detach replay exhausted"))?;
                same_shape("detach", &replayed, self.value(v))?;
                replayed
            }
            None => self.value(v).clone(),
        };
        self.detached.push(value.clone());
        Ok(self.constant(value))
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::AddCol(a, b)
            | Op::MulScalar(a, b)
            | Op::Bce(a, b)
            | Op::Dice(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::GatherElems(a, _)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SumRows(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Relu(a)
            | Op::LayerNorm(a)
            | Op::L2Normalize(a)
            | Op::Mix(a, _) => vec![*a],
        }
    }

    // ---- forward primitives -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", Op::MatMul(a, b), out)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        self.push("matmul_t", Op::MatMulT(a, b), out)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push("transpose", Op::Transpose(a), out)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.shape(v)[1])
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column counts {cols} and {}", t.cols()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push("concat_rows", Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.shape(v)[0])
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut cols = 0;
        for &p in parts {
            let [r, c] = self.shape(p);
            if r != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts {rows} and {r}"),
                ));
            }
            cols += c;
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..rows {
                for j in 0..t.cols() {
                    out.set(i, offset + j, t.get(i, j));
                }
            }
            offset += t.cols();
        }
        self.push("concat_cols", Op::ConcatCols(parts.to_vec()), out)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{end} of {} rows", t.rows()),
            ));
        }
        let c = t.cols();
        let out = Tensor::new(end - start, c, t.data()[start * c..end * c].to_vec())?;
        self.push("slice_rows", Op::SliceRows(a, start), out)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if start > end || end > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {} cols", t.cols()),
            ));
        }
        let out = Tensor::from_fn(t.rows(), end - start, |i, j| t.get(i, start + j));
        self.push("slice_cols", Op::SliceCols(a, start), out)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", t.rows()),
            ));
        }
        let out = t.select_rows(idx);
        self.push("gather_rows", Op::GatherRows(a, idx.to_vec()), out)
    }

    /// Gathers single entries into a `1 x k` row.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(a);
        let [r, c] = t.shape();
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::shape(
                "gather_elems",
                format!("entry ({i},{j}) of {r}x{c}"),
            ));
        }
        let out = Tensor::row(idx.iter().map(|&(i, j)| t.get(i, j)).collect());
        self.push("gather_elems", Op::GatherElems(a, idx.to_vec()), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", Op::Mul(a, b), out)
    }

    /// `a + b` with the `1 x n` row `b` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, b, |x, y| x + y)?;
        self.push("add_row", Op::AddRow(a, b), out)
    }

    /// `a * b` with the `1 x n` row `b` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, b, |x, y| x * y)?;
        self.push("mul_row", Op::MulRow(a, b), out)
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(Error::shape(
                op,
                format!("{:?} with row {:?}", ta.shape(), tb.shape()),
            ));
        }
        Ok(Tensor::from_fn(ta.rows(), ta.cols(), |i, j| {
            f(ta.get(i, j), tb.get(0, j))
        }))
    }

    /// `a + b` with the `m x 1` column `b` broadcast over columns.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols() != 1 || tb.rows() != ta.rows() {
            return Err(Error::shape(
                "add_col",
                format!("{:?} with column {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::from_fn(ta.rows(), ta.cols(), |i, j| ta.get(i, j) + tb.get(i, 0));
        self.push("add_col", Op::AddCol(a, b), out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).scale(s);
        self.push("scale", Op::Scale(a, s), out)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push("add_const", Op::AddConst(a), out)
    }

    /// `a` times the `1 x 1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let k = self.value(s).item().map_err(|_| {
            Error::shape("mul_scalar", format!("scale has shape {:?}", self.shape(s)))
        })?;
        let out = self.value(a).scale(k);
        self.push("mul_scalar", Op::MulScalar(a, s), out)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", Op::Sum(a), out)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", Op::Mean(a), out)
    }

    /// Per-row sums as an `m x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::from_fn(t.rows(), 1, |i, _| t.row_slice(i).iter().sum());
        self.push("sum_rows", Op::SumRows(a), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push("softmax_rows", Op::Softmax(a), out)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let row = t.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, v) in row.iter().enumerate() {
                out.set(i, j, v - lse);
            }
        }
        self.push("log_softmax_rows", Op::LogSoftmax(a), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push("sigmoid", Op::Sigmoid(a), out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push("log", Op::Log(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", Op::Exp(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push("relu", Op::Relu(a), out)
    }

    /// Per-row standardization (zero mean, unit variance), no affine part.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let (mu, inv) = row_moments(t.row_slice(i));
            for j in 0..t.cols() {
                out.set(i, j, (t.get(i, j) - mu) * inv);
            }
        }
        self.push("layer_norm_rows", Op::LayerNorm(a), out)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = t.clone();
        for i in 0..t.rows() {
            let n = row_norm(t.row_slice(i));
            for j in 0..t.cols() {
                out.set(i, j, t.get(i, j) / n);
            }
        }
        self.push("l2_normalize_rows", Op::L2Normalize(a), out)
    }

    /// Elementwise binary cross-entropy between probabilities `p` and
    /// targets `t`, with logarithms clamped by [`BCE_EPS`].
    pub fn bce(&mut self, p: Var, t: Var) -> Result<Var> {
        same_shape("bce", self.value(p), self.value(t))?;
        let out = self.value(p).zip_map(self.value(t), bce_value);
        self.push("bce", Op::Bce(p, t), out)
    }

    /// Per-row Dice coefficient `(2 sum(p t) + eps) / (sum(p) + sum(t) + eps)`
    /// as an `m x 1` column.
    pub fn dice_rows(&mut self, p: Var, t: Var) -> Result<Var> {
        same_shape("dice_rows", self.value(p), self.value(t))?;
        let (tp, tt) = (self.value(p), self.value(t));
        let out = Tensor::from_fn(tp.rows(), 1, |i, _| {
            let (a, b) = dice_parts(tp.row_slice(i), tt.row_slice(i));
            a / b
        });
        self.push("dice_rows", Op::Dice(p, t), out)
    }

    pub fn row_mix(&mut self, a: Var, mix: &Arc<RowMix>) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != mix.input_rows {
            return Err(Error::shape(
                "row_mix",
                format!("mix expects {} rows, got {}", mix.input_rows, t.rows()),
            ));
        }
        let c = t.cols();
        let mut out = Tensor::zeros(mix.rows.len(), c);
        for (i, terms) in mix.rows.iter().enumerate() {
            for &(j, w) in terms {
                for k in 0..c {
                    let v = out.get(i, k) + w * t.get(j, k);
                    out.set(i, k, v);
                }
            }
        }
        self.push("row_mix", Op::Mix(a, Arc::clone(mix)), out)
    }

    // ---- backward -----------------------------------------------------------

    /// Gradient of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let [r, c] = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, g.matmul_t(val(*b)).expect("checked in forward")),
                (
                    *b,
                    val(*a).transpose().matmul(g).expect("checked in forward"),
                ),
            ],
            Op::MatMulT(a, b) => vec![
                (*a, g.matmul(val(*b)).expect("checked in forward")),
                (
                    *b,
                    g.transpose().matmul(val(*a)).expect("checked in forward"),
                ),
            ],
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let rows = val(p).rows();
                        let idx: Vec<usize> = (offset..offset + rows).collect();
                        offset += rows;
                        (p, g.select_rows(&idx))
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let c = val(p).cols();
                        let start = offset;
                        offset += c;
                        (p, Tensor::from_fn(g.rows(), c, |i, j| g.get(i, start + j)))
                    })
                    .collect()
            }
            Op::SliceRows(a, start) => {
                let mut d = Tensor::zeros(val(*a).rows(), val(*a).cols());
                let c = g.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*a, d)]
            }
            Op::SliceCols(a, start) => {
                let mut d = Tensor::zeros(val(*a).rows(), val(*a).cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        d.set(i, start + j, g.get(i, j));
                    }
                }
                vec![(*a, d)]
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(val(*a).rows(), val(*a).cols());
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..g.cols() {
                        let v = d.get(src, j) + g.get(r, j);
                        d.set(src, j, v);
                    }
                }
                vec![(*a, d)]
            }
            Op::GatherElems(a, idx) => {
                let mut d = Tensor::zeros(val(*a).rows(), val(*a).cols());
                for (k, &(i, j)) in idx.iter().enumerate() {
                    let v = d.get(i, j) + g.get(0, k);
                    d.set(i, j, v);
                }
                vec![(*a, d)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)),
                (*b, g.zip_map(val(*a), |x, y| x * y)),
            ],
            Op::AddRow(a, b) => vec![(*a, g.clone()), (*b, column_sums(g))],
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let da = Tensor::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * tb.get(0, j));
                let db = column_sums(&g.zip_map(ta, |x, y| x * y));
                vec![(*a, da), (*b, db)]
            }
            Op::AddCol(a, b) => {
                let db = Tensor::from_fn(g.rows(), 1, |i, _| g.row_slice(i).iter().sum());
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MulScalar(a, s) => {
                let k = val(*s).data()[0];
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                vec![(*a, g.scale(k)), (*s, Tensor::scalar(ds))]
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                vec![(*a, Tensor::full(r, c, g.data()[0]))]
            }
            Op::Mean(a) => {
                let t = val(*a);
                let [r, c] = t.shape();
                vec![(*a, Tensor::full(r, c, g.data()[0] / t.len() as f64))]
            }
            Op::SumRows(a) => {
                let [r, c] = val(*a).shape();
                vec![(*a, Tensor::from_fn(r, c, |i, _| g.get(i, 0)))]
            }
            Op::Softmax(a) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let dot: f64 = g
                        .row_slice(i)
                        .iter()
                        .zip(y.row_slice(i))
                        .map(|(p, q)| p * q)
                        .sum();
                    for j in 0..y.cols() {
                        d.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for i in 0..y.rows() {
                    let total: f64 = g.row_slice(i).iter().sum();
                    for j in 0..y.cols() {
                        d.set(i, j, g.get(i, j) - y.get(i, j).exp() * total);
                    }
                }
                vec![(*a, d)]
            }
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gv, s| gv * s * (1.0 - s)))],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |gv, x| gv / x))],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |gv, e| gv * e))],
            Op::Relu(a) => vec![(
                *a,
                g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            )],
            Op::LayerNorm(a) => {
                let x = val(*a);
                let n = x.cols() as f64;
                let mut d = g.clone();
                for i in 0..x.rows() {
                    let (_, inv) = row_moments(x.row_slice(i));
                    let gr = g.row_slice(i);
                    let yr = y.row_slice(i);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                    for j in 0..x.cols() {
                        d.set(i, j, inv * (gr[j] - mean_g - yr[j] * mean_gy));
                    }
                }
                vec![(*a, d)]
            }
            Op::L2Normalize(a) => {
                let x = val(*a);
                let mut d = g.clone();
                for i in 0..x.rows() {
                    let n = row_norm(x.row_slice(i));
                    let gr = g.row_slice(i);
                    let yr = y.row_slice(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                    for j in 0..x.cols() {
                        d.set(i, j, (gr[j] - yr[j] * dot) / n);
                    }
                }
                vec![(*a, d)]
            }
            Op::Bce(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let dp = Tensor::from_fn(tp.rows(), tp.cols(), |i, j| {
                    let (pv, tv) = (tp.get(i, j), tt.get(i, j));
                    g.get(i, j) * (-tv / (pv + BCE_EPS) + (1.0 - tv) / (1.0 - pv + BCE_EPS))
                });
                let dt = Tensor::from_fn(tp.rows(), tp.cols(), |i, j| {
                    let pv = tp.get(i, j);
                    g.get(i, j) * ((1.0 - pv + BCE_EPS) / (pv + BCE_EPS)).ln()
                });
                vec![(*p, dp), (*t, dt)]
            }
            Op::Dice(p, t) => {
                let (tp, tt) = (val(*p), val(*t));
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                let mut dt = Tensor::zeros(tp.rows(), tp.cols());
                for i in 0..tp.rows() {
                    let (a, b) = dice_parts(tp.row_slice(i), tt.row_slice(i));
                    let gi = g.get(i, 0);
                    for j in 0..tp.cols() {
                        dp.set(i, j, gi * (2.0 * tt.get(i, j) * b - a) / (b * b));
                        dt.set(i, j, gi * (2.0 * tp.get(i, j) * b - a) / (b * b));
                    }
                }
                vec![(*p, dp), (*t, dt)]
            }
            Op::Mix(a, mix) => {
                let mut d = Tensor::zeros(mix.input_rows, g.cols());
                for (i, terms) in mix.rows.iter().enumerate() {
                    for &(j, w) in terms {
                        for k in 0..g.cols() {
                            let v = d.get(j, k) + w * g.get(i, k);
                            d.set(j, k, v);
                        }
                    }
                }
                vec![(*a, d)]
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Clamped binary cross-entropy of probability `p` against target `t`.
///
/// The clamp enters both numerator and denominator, so the value is exactly
/// zero when `p == t` with `t` binary and never negative for `t` in `[0, 1]`.
pub fn bce_value(p: f64, t: f64) -> f64 {
    let norm = (1.0 + BCE_EPS).ln();
    -(t * ((p + BCE_EPS).ln() - norm) + (1.0 - t) * ((1.0 - p + BCE_EPS).ln() - norm))
}

/// Numerator and denominator of the smoothed Dice coefficient.
pub fn dice_parts(p: &[f64], t: &[f64]) -> (f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    let total: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
    (2.0 * inter + DICE_EPS, total + DICE_EPS)
}

pub fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for i in 0..t.rows() {
        let row = t.row_slice(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.into_iter().enumerate() {
            out.set(i, j, e / z);
        }
    }
    out
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

fn row_norm(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + L2_EPS).sqrt()
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let v = out.get(0, j) + g.get(i, j);
            out.set(0, j, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn sum_of_sigmoid_has_quarter_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(3, 4));
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum(s).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unreached_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let unused = tape.param(Tensor::zeros(2, 3));
        let l = tape.mul(x, x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused), Tensor::zeros(2, 3));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn log_of_zero_is_numeric_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(1, 1));
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 3));
        let b = tape.param(Tensor::zeros(2, 2));
        match tape.add(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn detached_values_block_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let d = tape.detach(x).unwrap();
        let y = tape.mul(x, d).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[1.5]);
    }

    #[test]
    fn detach_replay_substitutes_values() {
        let mut tape = Tape::with_detach_replay(vec![Tensor::scalar(4.0)]);
        let x = tape.param(Tensor::scalar(1.0));
        let d = tape.detach(x).unwrap();
        assert_eq!(tape.value(d).data(), &[4.0]);
    }

    #[test]
    fn bce_is_zero_for_matching_binary_values() {
        assert_eq!(bce_value(1.0, 1.0), 0.0);
        assert_eq!(bce_value(0.0, 0.0), 0.0);
        assert!((bce_value(0.5, 1.0) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn dice_of_disjoint_masks_is_zero() {
        let (a, b) = dice_parts(&[1.0, 0.0], &[0.0, 1.0]);
        assert!(a / b < 1e-12);
        let (a, b) = dice_parts(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0]);
        assert_eq!(a / b, 1.0);
    }
}
