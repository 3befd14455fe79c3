//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as a node. Leaves created with
//! [`Graph::param`] require gradients; [`Graph::constant`] leaves do not.
//! Calling [`Graph::backward`] on a `1 × 1` node walks the tape in reverse
//! and returns the accumulated gradient of every node that needs one.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::gru::{self, GruCache, GruWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    RepeatRows(Var),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    RowDiff(Var),
    NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Mse(Var, Var),
    SymmetricCe(Var),
    Gru(Box<GruNode>),
}

#[derive(Debug)]
struct GruNode {
    x: Var,
    w_ih: Var,
    w_hh: Var,
    b_ih: Var,
    b_hh: Var,
    h0: Var,
    cache: Option<GruCache>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim("matmul inner dimension", va.cols(), vb.rows()));
        }
        let out = va.matmul(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::dim("matmul_t inner dimension", va.cols(), vb.cols()));
        }
        let out = va.matmul_t(vb);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), context)?;
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::dim(
                "add_row bias",
                format!("1x{}", va.cols()),
                format!("{}x{}", vr.rows(), vr.cols()),
            ));
        }
        let mut out = va.clone();
        let bias = vr.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols rows", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Row-wise concatenation of tensors with equal column counts.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or_else(|| Error::Contract("stack_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(Error::dim("stack_rows cols", cols, v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::StackRows(parts.to_vec()), ng))
    }

    /// Broadcast a `1 × n` row to `rows × n`.
    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != 1 {
            return Err(Error::dim("repeat_rows source rows", 1, v.rows()));
        }
        let row = v.row(0).to_vec();
        let out = Tensor::from_fn(rows, row.len(), |_, c| row[c]);
        let ng = self.ng(a);
        Ok(self.push(out, Op::RepeatRows(a), ng))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::dim("select_rows index", format!("< {}", v.rows()), bad));
        }
        let out = v.select_rows(idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), ng))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.cols()) {
            return Err(Error::dim("select_cols index", format!("< {}", v.cols()), bad));
        }
        let out = v.select_cols(idx);
        let ng = self.ng(a);
        Ok(self.push(out, Op::SelectCols(a, idx.to_vec()), ng))
    }

    /// Frame differences: row `i` of the output is `a[i+1] − a[i]`.
    pub fn row_diff(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() < 2 {
            return Err(Error::Input("row_diff needs at least two rows".into()));
        }
        let out = Tensor::from_fn(v.rows() - 1, v.cols(), |r, c| v.get(r + 1, c) - v.get(r, c));
        let ng = self.ng(a);
        Ok(self.push(out, Op::RowDiff(a), ng))
    }

    /// Scale every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = crate::tensor::norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Normalization);
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::NormalizeRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(a);
        self.push(out, Op::Mean(a), ng)
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for (v, w) in terms {
            let t = self.value(*v);
            if t.shape() != (1, 1) {
                return Err(Error::Contract("weighted_sum terms must be scalars".into()));
            }
            total += w * t.item();
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Mean of squared element differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "mse")?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = va.len().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Symmetric softmax cross-entropy of a square logit matrix against its
    /// diagonal: mean of the row-wise and column-wise losses.
    pub fn symmetric_ce(&mut self, logits: Var) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != v.cols() || v.rows() == 0 {
            return Err(Error::Contract(format!(
                "contrastive logits must be square and non-empty, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let (rows, cols) = softmax_both(v);
        let m = v.rows();
        let mut loss = 0.0;
        for i in 0..m {
            loss -= rows.get(i, i).ln() + cols.get(i, i).ln();
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss / (2.0 * m as f64)),
            Op::SymmetricCe(logits),
            ng,
        ))
    }

    /// Single-layer GRU over the rows of `x` (frames × input).
    ///
    /// Gate blocks in the `3H` weight columns are ordered reset, update,
    /// candidate.
    pub fn gru(
        &mut self,
        x: Var,
        w_ih: Var,
        w_hh: Var,
        b_ih: Var,
        b_hh: Var,
        h0: Var,
    ) -> Result<Var> {
        let weights = GruWeights {
            w_ih: self.value(w_ih),
            w_hh: self.value(w_hh),
            b_ih: self.value(b_ih),
            b_hh: self.value(b_hh),
        };
        weights.check(self.value(x).cols(), self.value(h0))?;
        let ng = [x, w_ih, w_hh, b_ih, b_hh, h0].iter().any(|v| self.ng(*v));
        let (out, cache) = gru::forward(&weights, self.value(x), self.value(h0), ng);
        let node = GruNode {
            x,
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            h0,
            cache,
        };
        Ok(self.push(out, Op::Gru(Box::new(node)), ng))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a·bᵀ: da = g·b, db = gᵀ·a
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |g, y| g * y));
                acc(*b, g.zip_map(self.value(*a), |g, x| g * x));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    acc(*row, Tensor::row_vector(g.column_sums()));
                }
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k)),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, s| g * s * (1.0 - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, t| g * (1.0 - t * t))),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.ng(*p) {
                        let idx: Vec<usize> = (off..off + w).collect();
                        acc(*p, g.select_cols(&idx));
                    }
                    off += w;
                }
            }
            Op::StackRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    if self.ng(*p) {
                        let idx: Vec<usize> = (off..off + h).collect();
                        acc(*p, g.select_rows(&idx));
                    }
                    off += h;
                }
            }
            Op::RepeatRows(a) => acc(*a, Tensor::row_vector(g.column_sums())),
            Op::SelectRows(a, idx) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for (k, &r) in idx.iter().enumerate() {
                    for (o, v) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(*a, d);
            }
            Op::SelectCols(a, idx) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for (k, &c) in idx.iter().enumerate() {
                        let cur = d.get(r, c);
                        d.set(r, c, cur + g.get(r, k));
                    }
                }
                acc(*a, d);
            }
            Op::RowDiff(a) => {
                let src = self.value(*a);
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let v = g.get(r, c);
                        d.set(r + 1, c, d.get(r + 1, c) + v);
                        d.set(r, c, d.get(r, c) - v);
                    }
                }
                acc(*a, d);
            }
            Op::NormalizeRows(a) => {
                // y = x/|x|: dx = (g − y·(g·y)) / |x|
                let src = self.value(*a);
                let y = &node.value;
                let mut d = Tensor::zeros(src.rows(), src.cols());
                for r in 0..src.rows() {
                    let n = crate::tensor::norm(src.row(r));
                    let gy = crate::tensor::dot(g.row(r), y.row(r));
                    for c in 0..src.cols() {
                        d.set(r, c, (g.get(r, c) - y.get(r, c) * gy) / n);
                    }
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Tensor::filled(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    acc(*v, Tensor::scalar(g.item() * w));
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / va.len().max(1) as f64;
                let diff = va.zip_map(vb, |x, y| k * (x - y));
                if self.ng(*b) {
                    acc(*b, diff.scale(-1.0));
                }
                acc(*a, diff);
            }
            Op::SymmetricCe(l) => {
                let v = self.value(*l);
                let m = v.rows();
                let (rows, cols) = softmax_both(v);
                let k = g.item() / (2.0 * m as f64);
                let mut d = rows.zip_map(&cols, |p, q| k * (p + q));
                for i in 0..m {
                    d.set(i, i, d.get(i, i) - 2.0 * k);
                }
                acc(*l, d);
            }
            Op::Gru(n) => {
                let cache = n
                    .cache
                    .as_ref()
                    .expect("gru node needing gradients keeps its cache");
                let weights = GruWeights {
                    w_ih: self.value(n.w_ih),
                    w_hh: self.value(n.w_hh),
                    b_ih: self.value(n.b_ih),
                    b_hh: self.value(n.b_hh),
                };
                let gg = gru::backward(&weights, self.value(n.x), cache, g);
                acc(n.x, gg.x);
                acc(n.w_ih, gg.w_ih);
                acc(n.w_hh, gg.w_hh);
                acc(n.b_ih, gg.b_ih);
                acc(n.b_hh, gg.b_hh);
                acc(n.h0, gg.h0);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise and column-wise softmax of a square matrix.
fn softmax_both(v: &Tensor) -> (Tensor, Tensor) {
    let m = v.rows();
    let mut rows = v.clone();
    for r in 0..m {
        let row = rows.row_mut(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        row.iter_mut().for_each(|x| *x = (*x - mx).exp() / z);
    }
    let mut cols = v.clone();
    for c in 0..m {
        let mx = (0..m).map(|r| v.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..m).map(|r| (v.get(r, c) - mx).exp()).sum();
        for r in 0..m {
            cols.set(r, c, (v.get(r, c) - mx).exp() / z);
        }
    }
    (rows, cols)
}
