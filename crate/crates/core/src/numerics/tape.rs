//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! parent handles. Nodes are appended in evaluation order, so a single reverse
//! sweep in [`Tape::backward`] visits each node after all of its consumers.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tensor};

/// Probability clamp applied inside [`Tape::bce_loss`].
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index groups for [`Tape::mean_rows`]. Shared so the same neighbourhood
/// structure can be reused by every layer.
pub type RowGroups = Arc<Vec<Vec<usize>>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MeanRows(Var, RowGroups),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    RowSum(Var),
    Sum(Var),
    Bce(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `var`; nodes the loss does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// `Some` only when the loss is connected to `var`.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads[var.0].take()
    }

    pub fn is_connected(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn finite(op: &'static str, t: Tensor) -> Result<Tensor, NumericsError> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(NumericsError::NonFinite { op })
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf: gradients are tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = finite("matmul", self.value(a).matmul(self.value(b))?)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = finite("matmul_t", self.value(a).matmul_t(self.value(b))?)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    /// Elementwise sum. A `1 × d` right operand is broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ng = self.needs(a) || self.needs(b);
        if sa == sb {
            let out = finite("add", self.value(a).zip_map(self.value(b), |x, y| x + y))?;
            Ok(self.push(out, Op::Add(a, b), ng))
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut out = self.value(a).clone();
            let row = self.value(b).row(0).to_vec();
            for r in 0..sa.0 {
                for (o, x) in out.row_mut(r).iter_mut().zip(&row) {
                    *o += x;
                }
            }
            let out = finite("add", out)?;
            Ok(self.push(out, Op::AddRow(a, b), ng))
        } else {
            Err(NumericsError::ShapeMismatch { op: "add", left: sa, right: sb })
        }
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(NumericsError::ShapeMismatch { op: "hadamard", left: sa, right: sb });
        }
        let out = finite("hadamard", self.value(a).zip_map(self.value(b), |x, y| x * y))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Hadamard(a, b), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(stable_sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// Row `g` of the output is the mean of the rows of `a` listed in
    /// `groups[g]`; an empty group yields a zero row.
    pub fn mean_rows(&mut self, a: Var, groups: RowGroups) -> Result<Var, NumericsError> {
        let src = self.value(a);
        let (n, d) = src.shape();
        let mut out = Tensor::zeros(groups.len(), d);
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let scale = 1.0 / members.len() as f64;
            let row = out.row_mut(g);
            for &m in members {
                if m >= n {
                    return Err(NumericsError::IndexOutOfRange { op: "mean_rows", index: m, len: n });
                }
                for (o, x) in row.iter_mut().zip(src.row(m)) {
                    *o += x * scale;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::MeanRows(a, groups), ng))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let n = self.shape(a).0;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: bad, len: n });
        }
        let out = self.value(a).select_rows(idx);
        let ng = self.needs(a);
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), ng))
    }

    /// Output has `target_rows` rows; row `idx[k]` accumulates row `k` of `contributions`.
    pub fn scatter_add_rows(
        &mut self,
        target_rows: usize,
        contributions: Var,
        idx: &[usize],
    ) -> Result<Var, NumericsError> {
        let (n, d) = self.shape(contributions);
        if idx.len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_add_rows",
                left: (n, d),
                right: (idx.len(), 1),
            });
        }
        let src = self.value(contributions);
        let mut out = Tensor::zeros(target_rows, d);
        for (k, &t) in idx.iter().enumerate() {
            if t >= target_rows {
                return Err(NumericsError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: t,
                    len: target_rows,
                });
            }
            for (o, x) in out.row_mut(t).iter_mut().zip(src.row(k)) {
                *o += x;
            }
        }
        let out = finite("scatter_add_rows", out)?;
        let ng = self.needs(contributions);
        Ok(self.push(out, Op::ScatterAddRows(contributions, idx.to_vec()), ng))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64, training: bool) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let mut out = src.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::Dropout(a, mask), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let out = self.value(a).reshaped(rows, cols)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// `n × d` → `n × 1` of row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let sums: Vec<f64> = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(sums.len(), 1, sums).expect("row count matches");
        let ng = self.needs(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = finite("sum", Tensor::scalar(self.value(a).sum()))?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Sum(a), ng))
    }

    /// Mean binary cross-entropy between probabilities `p` and `{0,1}` targets,
    /// both `n × 1` (or any equal shape). Probabilities are clamped to
    /// `[1e-12, 1 - 1e-12]` before the logarithm.
    pub fn bce_loss(&mut self, p: Var, targets: &Tensor) -> Result<Var, NumericsError> {
        let probs = self.value(p);
        if probs.shape() != targets.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_loss",
                left: probs.shape(),
                right: targets.shape(),
            });
        }
        if probs.is_empty() {
            return Err(NumericsError::InvalidArgument("bce_loss over zero elements".into()));
        }
        let n = probs.len() as f64;
        let mut total = 0.0;
        for (&q, &y) in probs.data().iter().zip(targets.data()) {
            let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * q.ln() + (1.0 - y) * (1.0 - q).ln();
        }
        let out = finite("bce_loss", Tensor::scalar(total / n))?;
        let ng = self.needs(p);
        Ok(self.push(out, Op::Bce(p, targets.data().to_vec()), ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.shape(loss) != (1, 1) {
            return Err(NumericsError::NonScalarLoss(self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.needs(*a) {
                        let ga = g.matmul(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t_matmul(self.value(*a))?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(*b) {
                        let mut gb = Tensor::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += x;
                            }
                        }
                        accumulate(&mut grads, *b, gb);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Hadamard(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                    }
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::MeanRows(a, groups) => {
                    let (n, d) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, d);
                    for (gi, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let scale = 1.0 / members.len() as f64;
                        for &m in members {
                            for (o, x) in ga.row_mut(m).iter_mut().zip(g.row(gi)) {
                                *o += x * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx_list) => {
                    let (n, d) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, d);
                    for (k, &i) in idx_list.iter().enumerate() {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx_list) => {
                    accumulate(&mut grads, *a, g.select_rows(idx_list));
                }
                Op::Dropout(a, mask) => {
                    let mut ga = g;
                    for (o, m) in ga.data_mut().iter_mut().zip(mask) {
                        *o *= m;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    accumulate(&mut grads, *a, g.reshaped(r, c)?);
                }
                Op::RowSum(a) => {
                    let (n, d) = self.shape(*a);
                    let mut ga = Tensor::zeros(n, d);
                    for r in 0..n {
                        let v = g.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|o| *o = v);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let (n, d) = self.shape(*a);
                    accumulate(&mut grads, *a, Tensor::filled(n, d, g.item()));
                }
                Op::Bce(a, targets) => {
                    let probs = self.value(*a);
                    let scale = g.item() / targets.len() as f64;
                    let mut ga = Tensor::zeros(probs.rows(), probs.cols());
                    for ((o, &q), &y) in ga.data_mut().iter_mut().zip(probs.data()).zip(targets) {
                        let q = q.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *o = scale * (-y / q + (1.0 - y) / (1.0 - q));
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        // Only leaves keep their gradients; intermediate slots were consumed above.
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
