//! Append-only tape for reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation evaluates eagerly and appends a node recording its inputs.
//! Inputs always refer to earlier nodes, so walking the tape backwards from a
//! scalar root is a valid reverse topological order. Leaves created with
//! [`Tape::constant`] are untracked; nodes computed only from untracked inputs
//! are untracked too and are skipped during the backward pass.

use crate::error::{Error, Result};
use crate::numcore::tensor::{row_norm, Tensor, NORM_FLOOR};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum OpKind {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    AddRowBroadcast(Var, Var),
    RepeatRows(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    SliceRows(Var, usize),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    /// Per-row norms; a zero entry marks a degenerate row passed through unchanged.
    L2NormalizeRows(Var, Vec<f64>),
    GroupMaxRows(Var, Vec<usize>),
}

impl OpKind {
    pub fn inputs(&self) -> Vec<Var> {
        use OpKind::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Hadamard(a, b) | AddRowBroadcast(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | RepeatRows(a)
            | Sigmoid(a)
            | Relu(a)
            | Log(a)
            | Exp(a)
            | Sum(a)
            | Mean(a)
            | Transpose(a)
            | SliceRows(a, _)
            | RowSoftmax(a)
            | RowLogSoftmax(a)
            | L2NormalizeRows(a, _)
            | GroupMaxRows(a, _) => vec![*a],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: OpKind,
    pub value: Tensor,
    pub tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    degenerate_rows: usize,
}

/// Gradients of a scalar root with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
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

    pub fn node(&self, v: Var) -> &TapeNode {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Number of rows skipped by normalization so far because their norm was ~0.
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, op: OpKind, value: Tensor) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(TapeNode { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(TapeNode {
            op: OpKind::Leaf,
            value,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(TapeNode {
            op: OpKind::Leaf,
            value,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(OpKind::MatMul(a, b), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(OpKind::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(OpKind::Sub(a, b), v))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(OpKind::Hadamard(a, b), v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(OpKind::Scale(a, c), v)
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row_broadcast(self.value(row))?;
        Ok(self.push(OpKind::AddRowBroadcast(a, row), v))
    }

    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = self.value(a).repeat_rows(n)?;
        Ok(self.push(OpKind::RepeatRows(a), v))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push(OpKind::Sigmoid(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(OpKind::Relu(a), v)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(OpKind::Log(a), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(OpKind::Exp(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(OpKind::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(OpKind::Mean(a), v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(OpKind::ConcatRows(parts.to_vec()), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&values)?;
        Ok(self.push(OpKind::ConcatCols(parts.to_vec()), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(OpKind::Transpose(a), v)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(OpKind::SliceRows(a, start), v))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).row_softmax();
        self.push(OpKind::RowSoftmax(a), v)
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a).row_log_softmax();
        self.push(OpKind::RowLogSoftmax(a), v)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = (0..x.rows())
            .map(|r| {
                let n = row_norm(x.row(r));
                if n < NORM_FLOOR {
                    0.0
                } else {
                    n
                }
            })
            .collect();
        let normalized = x.l2_normalize_rows();
        self.degenerate_rows += normalized.degenerate_rows.len();
        self.push(OpKind::L2NormalizeRows(a, norms), normalized.tensor)
    }

    pub fn group_max_rows(&mut self, a: Var, group: usize) -> Result<Var> {
        let (v, argmax) = self.value(a).group_max_rows_with_argmax(group)?;
        Ok(self.push(OpKind::GroupMaxRows(a, argmax), v))
    }

    /// `x W + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_broadcast(xw, b)
    }

    /// Reverse pass from a 1x1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &TapeNode, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        use OpKind::*;
        let y = &node.value;
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                if self.is_tracked(*a) {
                    let ga = g.matmul(&self.value(*b).transpose())?;
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let gb = self.value(*a).transpose().matmul(g)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Hadamard(a, b) => {
                if self.is_tracked(*a) {
                    let ga = g.hadamard(self.value(*b))?;
                    self.accumulate(grads, *a, ga);
                }
                if self.is_tracked(*b) {
                    let gb = g.hadamard(self.value(*a))?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            AddRowBroadcast(a, row) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *row, g.col_sums());
            }
            RepeatRows(a) => self.accumulate(grads, *a, g.col_sums()),
            Sigmoid(a) => {
                let ga = g.zip_map(y, "sigmoid'", |gv, yv| gv * yv * (1.0 - yv))?;
                self.accumulate(grads, *a, ga);
            }
            Relu(a) => {
                let ga = g.zip_map(self.value(*a), "relu'", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                self.accumulate(grads, *a, ga);
            }
            Log(a) => {
                let ga = g.zip_map(self.value(*a), "log'", |gv, xv| gv / xv)?;
                self.accumulate(grads, *a, ga);
            }
            Exp(a) => {
                let ga = g.hadamard(y)?;
                self.accumulate(grads, *a, ga);
            }
            Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Mean(a) => {
                let (r, c) = self.shape(*a);
                let count = (r * c) as f64;
                self.accumulate(grads, *a, Tensor::filled(r, c, g.item() / count));
            }
            ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.is_tracked(p) {
                        self.accumulate(grads, p, g.slice_rows(start, rows)?);
                    }
                    start += rows;
                }
            }
            ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.is_tracked(p) {
                        let gp = Tensor::from_fn(rows, cols, |r, c| g.get(r, start + c));
                        self.accumulate(grads, p, gp);
                    }
                    start += cols;
                }
            }
            Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            SliceRows(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for r in 0..g.rows() {
                    ga.row_mut(start + r).copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, ga);
            }
            RowSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for (out, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *out = yv * (*out - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            RowLogSoftmax(a) => {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for (out, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *out -= yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            L2NormalizeRows(a, norms) => {
                let mut ga = g.clone();
                for (r, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gv, yv)| gv * yv).sum();
                    for (out, &yv) in ga.row_mut(r).iter_mut().zip(y.row(r)) {
                        *out = (*out - yv * dot) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            GroupMaxRows(a, argmax) => {
                let (rows, cols) = self.shape(*a);
                let mut ga = Tensor::zeros(rows, cols);
                for (flat, &src_row) in argmax.iter().enumerate() {
                    let c = flat % cols;
                    let b = flat / cols;
                    let cur = ga.get(src_row, c);
                    ga.set(src_row, c, cur + g.get(b, c));
                }
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.is_tracked(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }
}
