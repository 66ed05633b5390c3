//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only record of operations. Inputs always precede
//! outputs, so reverse append order is a valid topological order and the
//! backward pass visits each node once. Nodes that cannot reach a
//! gradient-requiring leaf (constants, anything behind [`Graph::stop_grad`])
//! are skipped entirely during backward.

use super::gemm::{gemm, View};
use super::tensor::{softmax_slice, Tensor};
use crate::error::{LabError, Result};

/// Identity of a node in the active graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Relu(Var),
    StopGrad,
    Softmax(Var),
    Transpose(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    CrossEntropyUniform { logits: Var, probs: Vec<f64> },
    SliceCols { x: Var, start: usize },
    FactorMix { z: Var, assoc: Var, width: usize },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Entropy(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf, false)
    }

    /// `x · Wᵀ + b` for `x` of shape `[n_in]` or `[batch, n_in]` and `W` of shape `[n_out, n_in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        if ws.shape().len() != 2 || bs.shape() != [ws.shape()[0]] || xs.cols() != ws.shape()[1] || xs.shape().len() > 2
        {
            return Err(LabError::Dimension { op: "affine", left: xs.shape().to_vec(), right: ws.shape().to_vec() });
        }
        let (rows, n_in, n_out) = (xs.rows(), ws.shape()[1], ws.shape()[0]);
        let mut out = Vec::with_capacity(rows * n_out);
        for _ in 0..rows {
            out.extend_from_slice(bs.data());
        }
        gemm(
            View::row_major(xs.data(), rows, n_in),
            View::row_major(ws.data(), n_out, n_in).transposed(),
            1.0,
            &mut out,
        );
        let shape = if xs.shape().len() == 1 { vec![n_out] } else { vec![rows, n_out] };
        let tracked = self.tracked(&[x, w, b]);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Affine { x, w, b }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let out: Vec<f64> = xs.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(xs.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Relu(x), tracked)
    }

    /// Identity forward; blocks every gradient flowing back through this edge.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad, false)
    }

    /// Softmax over the last axis (each row independently).
    pub fn softmax(&mut self, x: Var) -> Var {
        let xs = self.value(x);
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..xs.rows() {
            out.extend(softmax_slice(xs.row(r)));
        }
        let value = Tensor::new(xs.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Softmax(x), tracked)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape().len() != 2 {
            return Err(LabError::Dimension { op: "transpose", left: xs.shape().to_vec(), right: vec![2] });
        }
        let (r, c) = (xs.shape()[0], xs.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Transpose(x), tracked))
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.value(logits);
        let (rows, n) = (ls.rows(), ls.cols());
        if labels.len() != rows {
            return Err(LabError::Dimension {
                op: "cross_entropy",
                left: ls.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut probs = Vec::with_capacity(rows * n);
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= n {
                return Err(LabError::Index { what: "cross_entropy label".into(), index: label, size: n });
            }
            let row = ls.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|&l| (l - lse).exp()));
        }
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.tracked(&[logits]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, tracked))
    }

    /// Mean over rows of `-(1/N) Σ_j log softmax(row)[j]`, the cross-entropy
    /// against a uniform label distribution.
    pub fn cross_entropy_to_uniform(&mut self, logits: Var) -> Var {
        let ls = self.value(logits);
        let (rows, n) = (ls.rows(), ls.cols());
        let mut probs = Vec::with_capacity(rows * n);
        let mut total = 0.0;
        for r in 0..rows {
            let row = ls.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            let mean_logit = row.iter().sum::<f64>() / n as f64;
            total += lse - mean_logit;
            probs.extend(row.iter().map(|&l| (l - lse).exp()));
        }
        let value = Tensor::scalar(total / rows as f64);
        let tracked = self.tracked(&[logits]);
        self.push(value, Op::CrossEntropyUniform { logits, probs }, tracked)
    }

    /// Columns `start..start + len` of a 1-D or 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x);
        let cols = xs.cols();
        if len == 0 || start + len > cols || xs.shape().len() > 2 {
            return Err(LabError::Dimension { op: "slice_cols", left: xs.shape().to_vec(), right: vec![start, len] });
        }
        let mut out = Vec::with_capacity(xs.rows() * len);
        for r in 0..xs.rows() {
            out.extend_from_slice(&xs.row(r)[start..start + len]);
        }
        let shape = if xs.shape().len() == 1 { vec![len] } else { vec![xs.rows(), len] };
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, tracked))
    }

    /// Per-row block mixing. Each row of `z` holds `K` consecutive blocks of
    /// `width` values (the columns of a `width × K` matrix); `assoc` is `K × M`.
    /// Each output row holds the `M` blocks of the product `Z · assoc`.
    pub fn factor_mix(&mut self, z: Var, assoc: Var, width: usize) -> Result<Var> {
        let (zs, a) = (self.value(z), self.value(assoc));
        if a.shape().len() != 2 || width == 0 || zs.cols() != width * a.shape()[0] || zs.shape().len() > 2 {
            return Err(LabError::Dimension { op: "factor_mix", left: zs.shape().to_vec(), right: a.shape().to_vec() });
        }
        let (k, m) = (a.shape()[0], a.shape()[1]);
        let rows = zs.rows();
        let mut out = vec![0.0; rows * m * width];
        for r in 0..rows {
            let zrow = zs.row(r);
            let orow = &mut out[r * m * width..(r + 1) * m * width];
            for f in 0..k {
                let block = &zrow[f * width..(f + 1) * width];
                for c in 0..m {
                    let weight = a.data()[f * m + c];
                    if weight == 0.0 {
                        continue;
                    }
                    for (o, &zv) in orow[c * width..(c + 1) * width].iter_mut().zip(block) {
                        *o += weight * zv;
                    }
                }
            }
        }
        let shape = if zs.shape().len() == 1 { vec![m * width] } else { vec![rows, m * width] };
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked(&[z, assoc]);
        Ok(self.push(value, Op::FactorMix { z, assoc, width }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(LabError::Dimension { op: "add", left: x.shape().to_vec(), right: y.shape().to_vec() });
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(LabError::Dimension { op: "mul", left: x.shape().to_vec(), right: y.shape().to_vec() });
        }
        let out = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xs = self.value(x);
        let out = xs.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xs.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Scale(x, factor), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), tracked)
    }

    /// `Σ -x ln x` over every entry, with `0 ln 0 = 0`.
    pub fn entropy(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Entropy(x), tracked)
    }

    /// Sum of several scalars (or same-shaped tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or_else(|| LabError::Contract("add_all of no terms".into()))?;
        let mut acc = *first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(LabError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, contribution: impl FnOnce(&mut [f64])) {
        if !self.nodes[target.0].tracked {
            return;
        }
        let slot = grads[target.0].get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        contribution(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Affine { x, w, b } => {
                let (xs, ws) = (self.value(*x), self.value(*w));
                let (rows, n_in, n_out) = (xs.rows(), ws.shape()[1], ws.shape()[0]);
                let gv = View::row_major(g, rows, n_out);
                self.accumulate(grads, *x, |dx| {
                    gemm(gv, View::row_major(ws.data(), n_out, n_in), 1.0, dx);
                });
                self.accumulate(grads, *w, |dw| {
                    gemm(gv.transposed(), View::row_major(xs.data(), rows, n_in), 1.0, dw);
                });
                self.accumulate(grads, *b, |db| {
                    for r in 0..rows {
                        for (d, gv) in db.iter_mut().zip(&g[r * n_out..(r + 1) * n_out]) {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xs = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for ((d, &xv), &gv) in dx.iter_mut().zip(xs.data()).zip(g) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &gv) in dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                self.accumulate(grads, *x, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                self.accumulate(grads, *logits, |dl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[r * n + j] += scale * (probs[r * n + j] - onehot);
                        }
                    }
                });
            }
            Op::CrossEntropyUniform { logits, probs } => {
                let ls = self.value(*logits);
                let (rows, n) = (ls.rows(), ls.cols());
                let scale = g[0] / rows as f64;
                let uniform = 1.0 / n as f64;
                self.accumulate(grads, *logits, |dl| {
                    for (d, &p) in dl.iter_mut().zip(probs) {
                        *d += scale * (p - uniform);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let xs = self.value(*x);
                let (cols, len) = (xs.cols(), node.value.cols());
                self.accumulate(grads, *x, |dx| {
                    for r in 0..xs.rows() {
                        for (d, &gv) in
                            dx[r * cols + start..r * cols + start + len].iter_mut().zip(&g[r * len..(r + 1) * len])
                        {
                            *d += gv;
                        }
                    }
                });
            }
            Op::FactorMix { z, assoc, width } => {
                let (zs, a) = (self.value(*z), self.value(*assoc));
                let (k, m, w) = (a.shape()[0], a.shape()[1], *width);
                let rows = zs.rows();
                self.accumulate(grads, *z, |dz| {
                    for r in 0..rows {
                        let grow = &g[r * m * w..(r + 1) * m * w];
                        for f in 0..k {
                            let dblock = &mut dz[r * k * w + f * w..r * k * w + (f + 1) * w];
                            for c in 0..m {
                                let weight = a.data()[f * m + c];
                                for (d, &gv) in dblock.iter_mut().zip(&grow[c * w..(c + 1) * w]) {
                                    *d += weight * gv;
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *assoc, |da| {
                    for r in 0..rows {
                        let grow = &g[r * m * w..(r + 1) * m * w];
                        let zrow = zs.row(r);
                        for f in 0..k {
                            let block = &zrow[f * w..(f + 1) * w];
                            for c in 0..m {
                                da[f * m + c] +=
                                    block.iter().zip(&grow[c * w..(c + 1) * w]).map(|(p, q)| p * q).sum::<f64>();
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
                self.accumulate(grads, *b, |db| db.iter_mut().zip(g).for_each(|(d, gv)| *d += gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * o;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gv), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * o;
                    }
                });
            }
            Op::Scale(x, factor) => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv * factor));
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Entropy(x) => {
                let xs = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for (d, &p) in dx.iter_mut().zip(xs.data()) {
                        if p > 0.0 {
                            *d -= g[0] * (p.ln() + 1.0);
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zero when no path reaches it.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Whether any gradient reached `v`.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn affine_identity_and_row_sum() {
        let mut g = Graph::new();
        let w = g.constant(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(&Tensor::vector(vec![0.0, 0.0]));
        let x = g.constant(&Tensor::vector(vec![3.0, -1.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, -1.0]);

        let w = g.constant(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let b = g.constant(&Tensor::vector(vec![0.0]));
        let x = g.constant(&Tensor::vector(vec![2.0, 5.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let w = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2]));
        let x = g.constant(&Tensor::zeros(&[4]));
        let err = g.affine(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4]") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn relu_forward_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![-1.0, 2.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![0.0; 4]));
        let y = g.softmax(x);
        for &p in g.value(y).data() {
            assert_abs_diff_eq!(p, 0.25, epsilon = 1e-15);
        }
        let x = g.constant(&Tensor::vector(vec![0.0, 3f64.ln()]));
        let y = g.softmax(x);
        assert_abs_diff_eq!(g.value(y).data()[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[1], 0.75, epsilon = 1e-12);
        let x = g.constant(&Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![0.0; 5]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert_abs_diff_eq!(g.value(l).item(), 5f64.ln(), epsilon = 1e-12);

        let x = g.constant(&Tensor::vector(vec![10.0, 0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        // -log(e^10 / (e^10 + 2)) = log(1 + 2 e^-10)
        let expected = (1.0 + 2.0 * (-10f64).exp()).ln();
        assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-15);
        assert!((g.value(l).item() - 9.08e-5).abs() < 1e-7);

        assert!(matches!(g.cross_entropy(x, &[3]), Err(LabError::Index { .. })));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.5, -1.0, 2.0]));
        let l = g.cross_entropy(x, &[1]).unwrap();
        let grad = g.backward(l).unwrap().wrt(x);
        let p = softmax_slice(&[0.5, -1.0, 2.0]);
        let expected = [p[0], p[1] - 1.0, p[2]];
        for (a, b) in grad.data().iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn cross_entropy_to_uniform_examples() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![0.0; 5]));
        let l = g.cross_entropy_to_uniform(x);
        assert_abs_diff_eq!(g.value(l).item(), 5f64.ln(), epsilon = 1e-12);
        let grad = g.backward(l).unwrap().wrt(x);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-12));

        let mut g = Graph::new();
        let x = g.constant(&Tensor::vector(vec![3f64.ln(), 0.0]));
        let l = g.cross_entropy_to_uniform(x);
        let expected = -0.5 * (0.75f64.ln() + 0.25f64.ln());
        assert_abs_diff_eq!(g.value(l).item(), expected, epsilon = 1e-12);
        assert!((expected - 0.8369).abs() < 1e-4);
    }

    #[test]
    fn stop_grad_freezes_its_factor() {
        // d/dx [sg(x) * x] at 3 is 3
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        let frozen = g.stop_grad(x);
        assert_eq!(g.value(frozen).data(), g.value(x).data());
        let y = g.mul(frozen, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 3.0);

        // d/dx [sg(x^2) + x] is 1
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(-1.7));
        let sq = g.mul(x, x).unwrap();
        let frozen = g.stop_grad(sq);
        let y = g.add(frozen, x).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).item(), 1.0);
    }

    #[test]
    fn backward_sum_and_unreached_leaves() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![4.0, 5.0, 6.0]));
        let unused = g.param(&Tensor::vector(vec![1.0, 1.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
        assert!(!grads.reached(unused));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(LabError::Contract(_))));
    }

    #[test]
    fn stop_grad_between_loss_and_leaf_gives_exact_zero() {
        let mut g = Graph::new();
        let w = g.param(&Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap());
        let b = g.param(&Tensor::vector(vec![0.1, 0.2]));
        let x = g.constant(&Tensor::vector(vec![1.0, 2.0]));
        let h = g.affine(x, w, b).unwrap();
        let cut = g.stop_grad(h);
        let l = g.cross_entropy(cut, &[0]).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(w).data().iter().all(|&v| v == 0.0));
        assert!(grads.wrt(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factor_mix_selects_and_averages() {
        // width 2, K = 3 blocks: z = [1 2 | 3 4 | 5 6]
        let mut g = Graph::new();
        let z = g.constant(&Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let a = g.constant(&Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let out = g.factor_mix(z, a, 2).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 4.0, 1.0, 2.0]);
        let a = g.constant(&Tensor::matrix(3, 2, vec![0.5, 1.0 / 3.0, 0.5, 1.0 / 3.0, 0.0, 1.0 / 3.0]).unwrap());
        let out = g.factor_mix(z, a, 2).unwrap();
        let v = g.value(out).data();
        assert_abs_diff_eq!(v[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[3], 4.0, epsilon = 1e-12);
    }
}
