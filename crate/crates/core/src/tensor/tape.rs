//! Matrix-level Wengert tape.
//!
//! Every primitive appends one node holding its output value and whatever it
//! needs for the backward pass. Node inputs always refer to earlier nodes, so a
//! single reverse sweep over the node list is a valid topological order.

use std::sync::Arc;

use rayon::prelude::*;

use super::kernels::{gelu, gelu_grad, log_sum_exp, moments, softmax_in_place};
use super::Matrix;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Detach,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Matrix,
    },
    StraightThrough(Var),
    GatheredAttention(Box<AttentionSaved>),
}

struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    neighbors: Arc<Vec<Vec<usize>>>,
    heads: usize,
    scale: f64,
    /// Per query: `heads` consecutive blocks of attention weights over its keys.
    probs: Vec<Vec<f64>>,
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records primitive operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    parallel: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; zeros when `var` does not reach the loss.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape_str(), b.shape_str()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Allow primitives to split work over disjoint output rows with rayon.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A copy of `v`'s value that blocks gradient flow (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Detach)
    }

    /// A constant with no gradient path.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Detach)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        let (x, y) = (self.value(a), self.value(b));
        check_same(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |p, q| p * q)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `a + row`, with the 1xn `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::shape("add_row", x.shape_str(), r.shape_str()));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(value, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| gelu(*v)).collect();
        let value = Matrix::from_vec(x.rows(), x.cols(), data).expect("same shape");
        self.push(value, Op::Gelu(a))
    }

    /// Rows `indices[r]` of `a`, stacked in order.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut value = Matrix::zeros(indices.len(), x.cols());
        for (r, &src) in indices.iter().enumerate() {
            if src >= x.rows() {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: src,
                    bound: x.rows(),
                });
            }
            value.row_mut(r).copy_from_slice(x.row(src));
        }
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        if start + width > x.cols() || width == 0 {
            return Err(Error::shape(
                "slice_cols",
                x.shape_str(),
                format!("columns {start}..{}", start + width),
            ));
        }
        let mut value = Matrix::zeros(x.rows(), width);
        for r in 0..x.rows() {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + width]);
        }
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let m = self.value(p);
            if m.rows() != rows {
                return Err(Error::shape("concat_cols", format!("{rows} rows"), m.shape_str()));
            }
            cols += m.cols();
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = &self.nodes[p.0].value;
            for r in 0..rows {
                value.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            if m.cols() != cols {
                return Err(Error::shape("concat_rows", format!("{cols} cols"), m.shape_str()));
            }
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a))
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a).expect("same shape");
        self.sum_all(sq)
    }

    /// Row-wise softmax. Entries equal to `-inf` are treated as masked.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                return Err(Error::Numeric("softmax_rows input"));
            }
            if row.iter().all(|v| *v == f64::NEG_INFINITY) {
                return Err(Error::contract(format!("softmax row {r} is fully masked")));
            }
            softmax_in_place(row);
        }
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Per-row layer normalisation with 1xd `gain` and `bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xm, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let d = xm.cols();
        if g.shape() != (1, d) || b.shape() != (1, d) {
            return Err(Error::shape(
                "layer_norm_rows",
                xm.shape_str(),
                format!("gain {}, bias {}", g.shape_str(), b.shape_str()),
            ));
        }
        let mut xhat = Matrix::zeros(xm.rows(), d);
        let mut inv_std = Vec::with_capacity(xm.rows());
        let mut value = Matrix::zeros(xm.rows(), d);
        for r in 0..xm.rows() {
            let (mean, is) = moments(xm.row(r), eps);
            inv_std.push(is);
            for c in 0..d {
                let h = (xm.get(r, c) - mean) * is;
                xhat.set(r, c, h);
                value.set(r, c, h * g.data()[c] + b.data()[c]);
            }
        }
        Ok(self.push(
            value,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// `sum_t weights[t] * (-log softmax(logits[t])[targets[t]])` as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let z = self.value(logits);
        if targets.len() != z.rows() || weights.len() != z.rows() {
            return Err(Error::shape(
                "cross_entropy",
                z.shape_str(),
                format!("{} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut total = 0.0;
        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = z.row(r);
            if t >= row.len() {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    bound: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("cross-entropy logits"));
            }
            let lse = log_sum_exp(row);
            if w != 0.0 {
                total += w * (lse - row[t]);
            }
            for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        Ok(self.push(
            Matrix::filled(1, 1, total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    /// Forward value of `forward`, gradient routed unchanged to `bypass`.
    ///
    /// This is the straight-through estimator: `forward` (e.g. quantised
    /// codebook rows) receives no gradient from this node.
    pub fn straight_through(&mut self, bypass: Var, forward: Var) -> Result<Var> {
        check_same("straight_through", self.value(bypass), self.value(forward))?;
        let value = self.value(forward).clone();
        Ok(self.push(value, Op::StraightThrough(bypass)))
    }

    /// Scaled dot-product attention where query row `t` attends only to the key
    /// rows listed in `neighbors[t]` (in that order).
    ///
    /// `q` is `n_q x D`, `k` and `v` are `n_k x D`; `D` splits into `heads`
    /// equal column blocks that attend independently.
    pub fn gathered_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        neighbors: Arc<Vec<Vec<usize>>>,
        heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        if km.shape() != vm.shape() || qm.cols() != km.cols() {
            return Err(Error::shape(
                "gathered_attention",
                format!("q {}", qm.shape_str()),
                format!("k {}, v {}", km.shape_str(), vm.shape_str()),
            ));
        }
        if neighbors.len() != qm.rows() {
            return Err(Error::shape(
                "gathered_attention",
                format!("{} queries", qm.rows()),
                format!("{} neighbour lists", neighbors.len()),
            ));
        }
        let width = qm.cols();
        if heads == 0 || width % heads != 0 {
            return Err(Error::contract(format!("{heads} heads do not divide width {width}")));
        }
        for (t, keys) in neighbors.iter().enumerate() {
            if keys.is_empty() {
                return Err(Error::contract(format!("query {t} has no admissible keys")));
            }
            if let Some(&bad) = keys.iter().find(|&&u| u >= km.rows()) {
                return Err(Error::Index {
                    what: "attention key",
                    index: bad,
                    bound: km.rows(),
                });
            }
        }
        let dh = width / heads;
        let per_query = |t: usize| -> (Vec<f64>, Vec<f64>) {
            let keys = &neighbors[t];
            let qrow = qm.row(t);
            let mut out = vec![0.0; width];
            let mut probs = Vec::with_capacity(keys.len() * heads);
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = &qrow[cols.clone()];
                let start = probs.len();
                for &u in keys {
                    let kh = &km.row(u)[cols.clone()];
                    let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                    probs.push(dot * scale);
                }
                softmax_in_place(&mut probs[start..]);
                let oh = &mut out[cols.clone()];
                for (&u, &p) in keys.iter().zip(&probs[start..]) {
                    for (o, x) in oh.iter_mut().zip(&vm.row(u)[cols.clone()]) {
                        *o += p * x;
                    }
                }
            }
            (out, probs)
        };
        let results: Vec<(Vec<f64>, Vec<f64>)> = if self.parallel {
            (0..qm.rows()).into_par_iter().map(per_query).collect()
        } else {
            (0..qm.rows()).map(per_query).collect()
        };
        let mut value = Matrix::zeros(qm.rows(), width);
        let mut saved = Vec::with_capacity(results.len());
        for (t, (out, probs)) in results.into_iter().enumerate() {
            value.row_mut(t).copy_from_slice(&out);
            saved.push(probs);
        }
        Ok(self.push(
            value,
            Op::GatheredAttention(Box::new(AttentionSaved {
                q,
                k,
                v,
                neighbors,
                heads,
                scale,
                probs: saved,
            })),
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::shape("backward", "1x1 loss", lv.shape_str()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(*a, g.matmul(&bm.transpose()).expect("shapes checked in forward"));
                acc(*b, am.transpose().matmul(g).expect("shapes checked in forward"));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                acc(*a, zip(g, bm, |x, y| x * y));
                acc(*b, zip(g, am, |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                let mut col = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (c, x) in col.data_mut().iter_mut().zip(g.row(r)) {
                        *c += x;
                    }
                }
                acc(*row, col);
            }
            Op::Scale(a, c) => acc(*a, map(g, |x| x * c)),
            Op::Gelu(a) => acc(*a, zip(g, self.value(*a), |x, y| x * gelu_grad(y))),
            Op::GatherRows(a, indices) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut d = Matrix::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Matrix::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.value(p).shape();
                    let d = Matrix::from_vec(rows, cols, g.data()[off * cols..(off + rows) * cols].to_vec())
                        .expect("slice of gradient");
                    off += rows;
                    acc(p, d);
                }
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in d.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, d);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let (rows, d) = xhat.shape();
                let mut dx = Matrix::zeros(rows, d);
                let mut dg = Matrix::zeros(1, d);
                let mut db = Matrix::zeros(1, d);
                let n = d as f64;
                for r in 0..rows {
                    let gr = g.row(r);
                    let hr = xhat.row(r);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        dg.data_mut()[c] += gr[c] * hr[c];
                        db.data_mut()[c] += gr[c];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        let dh = gr[c] * gv[c];
                        out[c] = inv_std[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let up = g.data()[0];
                let mut d = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= w * up;
                    }
                }
                acc(*logits, d);
            }
            Op::StraightThrough(bypass) => acc(*bypass, g.clone()),
            Op::GatheredAttention(saved) => {
                let (dq, dk, dv) = self.attention_backward(saved, g);
                acc(saved.q, dq);
                acc(saved.k, dk);
                acc(saved.v, dv);
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &Matrix) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let width = qm.cols();
        let dh = width / s.heads;
        let mut dq = Matrix::zeros(qm.rows(), width);
        let mut dk = Matrix::zeros(km.rows(), width);
        let mut dv = Matrix::zeros(vm.rows(), width);
        for (t, keys) in s.neighbors.iter().enumerate() {
            let probs = &s.probs[t];
            for h in 0..s.heads {
                let cols = h * dh..(h + 1) * dh;
                let p = &probs[h * keys.len()..(h + 1) * keys.len()];
                let dy = &g.row(t)[cols.clone()];
                let dp: Vec<f64> = keys
                    .iter()
                    .map(|&u| dy.iter().zip(&vm.row(u)[cols.clone()]).map(|(a, b)| a * b).sum())
                    .collect();
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for (idx, &u) in keys.iter().enumerate() {
                    let ds = p[idx] * (dp[idx] - dot) * s.scale;
                    for c in cols.clone() {
                        dq.data_mut()[t * width + c] += ds * km.get(u, c);
                        dk.data_mut()[u * width + c] += ds * qm.get(t, c);
                        dv.data_mut()[u * width + c] += p[idx] * g.get(t, c);
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("same shape")
}
