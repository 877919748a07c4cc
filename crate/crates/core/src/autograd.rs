//! Matrix-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! through [`Tape::param`], which caches one leaf per parameter name; after
//! [`Tape::backward`] the accumulated gradient of each parameter is returned
//! keyed by that name. A frozen tape records parameters as constants, which is
//! how the momentum encoders run without contributing gradients.

use std::collections::{BTreeMap, HashMap};

use crate::tensor::{dot, sigmoid, Matrix};

/// Floor applied inside every `log` of a probability.
pub const LOG_EPS: f64 = 1e-12;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(&'static str),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gather(Var, Vec<usize>),
    MeanRows(Var),
    Concat(Vec<Var>),
    Transpose(Var),
    Softmax(Var),
    CausalSoftmax(Var),
    Sigmoid(Var),
    RowScale(Var, Var),
    NormalizeRows(Var),
    SoftCrossEntropy { logits: Var, targets: Matrix, weights: Vec<f64>, probs: Matrix },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<&'static str, Var>,
    frozen: bool,
}

pub type Gradients = BTreeMap<&'static str, Matrix>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are recorded as constants.
    pub fn frozen() -> Self {
        Self { frozen: true, ..Self::default() }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, name: &'static str, value: &Matrix) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = if self.frozen {
            self.push(value.clone(), Op::Constant, false)
        } else {
            self.push(value.clone(), Op::Param(name), true)
        };
        self.params.insert(name, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMulT(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), t)
    }

    /// Adds the `1 × n` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let cols = value.cols();
        for i in 0..value.rows() {
            for j in 0..cols {
                value.set(i, j, value.get(i, j) + r.get(0, j));
            }
        }
        let t = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let t = self.tracked(a);
        self.push(value, Op::Scale(a, factor), t)
    }

    /// Row lookup, `out[i] = table[indices[i]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Var {
        let value = self.value(table).select_rows(indices);
        let t = self.tracked(table);
        self.push(value, Op::Gather(table, indices.to_vec()), t)
    }

    /// Column-wise mean, producing a single row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.rows() as f64;
        let mut out = Matrix::zeros(1, m.cols());
        for i in 0..m.rows() {
            for (o, v) in out.row_mut(0).iter_mut().zip(m.row(i)) {
                *o += v;
            }
        }
        let value = out.scale(1.0 / n);
        let t = self.tracked(a);
        self.push(value, Op::MeanRows(a), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::vstack(&mats);
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(value, Op::Concat(parts.to_vec()), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(a);
        self.push(value, Op::Transpose(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            value.row_mut(i).copy_from_slice(&crate::tensor::softmax(m.row(i)));
        }
        let t = self.tracked(a);
        self.push(value, Op::Softmax(a), t)
    }

    /// Row softmax of a square matrix where entry `(i, j)` with `j > i` is masked out.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), m.cols(), "causal softmax expects a square matrix");
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let probs = crate::tensor::softmax(&m.row(i)[..=i]);
            value.row_mut(i)[..=i].copy_from_slice(&probs);
        }
        let t = self.tracked(a);
        self.push(value, Op::CausalSoftmax(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(value, Op::Sigmoid(a), t)
    }

    /// Scales row `i` of `a` by `column[i]`, where `column` is `n × 1`.
    pub fn row_scale(&mut self, a: Var, column: Var) -> Var {
        let m = self.value(a);
        let c = self.value(column);
        assert_eq!(c.shape(), (m.rows(), 1), "row_scale expects an n x 1 gate");
        let mut value = m.clone();
        for i in 0..value.rows() {
            let g = c.get(i, 0);
            for v in value.row_mut(i) {
                *v *= g;
            }
        }
        let t = self.tracked(a) || self.tracked(column);
        self.push(value, Op::RowScale(a, column), t)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for i in 0..value.rows() {
            let norm = dot(m.row(i), m.row(i)).sqrt().max(NORM_EPS);
            for v in value.row_mut(i) {
                *v /= norm;
            }
        }
        let t = self.tracked(a);
        self.push(value, Op::NormalizeRows(a), t)
    }

    /// `Σ_i weights[i] · Σ_k −targets[i,k] · log max(softmax(logits_i)_k, LOG_EPS)`.
    ///
    /// Targets are constants; no gradient flows into them.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix, weights: Vec<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape(), "cross-entropy target shape mismatch");
        assert_eq!(weights.len(), z.rows(), "one weight per row");
        let mut probs = Matrix::zeros(z.rows(), z.cols());
        let mut total = 0.0;
        for i in 0..z.rows() {
            let row = z.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            let mut row_loss = 0.0;
            for k in 0..z.cols() {
                let log_p = row[k] - lse;
                let p = log_p.exp();
                probs.set(i, k, p);
                let t = targets.get(i, k);
                if t != 0.0 {
                    row_loss -= t * if p < LOG_EPS { LOG_EPS.ln() } else { log_p };
                }
            }
            total += weights[i] * row_loss;
        }
        let t = self.tracked(logits);
        self.push(
            Matrix::filled(1, 1, total),
            Op::SoftCrossEntropy { logits, targets, weights, probs },
            t,
        )
    }

    pub fn sum(&mut self, scalars: &[Var]) -> Var {
        let total: f64 = scalars.iter().map(|&s| self.scalar(s)).sum();
        let t = scalars.iter().any(|&s| self.tracked(s));
        self.push(Matrix::filled(1, 1, total), Op::Sum(scalars.to_vec()), t)
    }

    /// Gradients of the scalar `root` with respect to every parameter recorded on this tape.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name, g);
                }
                Op::MatMul(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.tracked(*row) {
                        let mut r = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (o, v) in r.row_mut(0).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads, *row, r);
                    }
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, g.scale(*f)),
                Op::Gather(table, indices) => {
                    let tv = self.value(*table);
                    let mut d = Matrix::zeros(tv.rows(), tv.cols());
                    for (i, &src) in indices.iter().enumerate() {
                        for (o, v) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    accumulate(&mut grads, *table, d);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows() as f64;
                    let mut d = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..av.rows() {
                        for (o, v) in d.row_mut(i).iter_mut().zip(g.row(0)) {
                            *o = v * inv;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        if self.tracked(p) {
                            let idx: Vec<usize> = (offset..offset + rows).collect();
                            accumulate(&mut grads, p, g.select_rows(&idx));
                        }
                        offset += rows;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::Softmax(a) | Op::CausalSoftmax(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let inner = dot(g.row(i), y.row(i));
                        for j in 0..y.cols() {
                            d.set(i, j, y.get(i, j) * (g.get(i, j) - inner));
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (dv, yv) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= yv * (1.0 - yv);
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::RowScale(a, column) => {
                    let av = self.value(*a);
                    let cv = self.value(*column);
                    if self.tracked(*a) {
                        let mut d = g.clone();
                        for i in 0..d.rows() {
                            let c = cv.get(i, 0);
                            for v in d.row_mut(i) {
                                *v *= c;
                            }
                        }
                        accumulate(&mut grads, *a, d);
                    }
                    if self.tracked(*column) {
                        let mut d = Matrix::zeros(cv.rows(), 1);
                        for i in 0..av.rows() {
                            d.set(i, 0, dot(g.row(i), av.row(i)));
                        }
                        accumulate(&mut grads, *column, d);
                    }
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for i in 0..x.rows() {
                        let norm = dot(x.row(i), x.row(i)).sqrt().max(NORM_EPS);
                        let proj = dot(y.row(i), g.row(i));
                        for j in 0..x.cols() {
                            d.set(i, j, (g.get(i, j) - y.get(i, j) * proj) / norm);
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SoftCrossEntropy { logits, targets, weights, probs } => {
                    let upstream = g.get(0, 0);
                    let mut d = Matrix::zeros(probs.rows(), probs.cols());
                    for i in 0..probs.rows() {
                        // Clamped entries contribute a constant, hence no gradient.
                        let mut live_mass = 0.0;
                        for k in 0..probs.cols() {
                            if probs.get(i, k) >= LOG_EPS {
                                live_mass += targets.get(i, k);
                            }
                        }
                        for j in 0..probs.cols() {
                            let own = if probs.get(i, j) >= LOG_EPS { targets.get(i, j) } else { 0.0 };
                            d.set(i, j, upstream * weights[i] * (probs.get(i, j) * live_mass - own));
                        }
                    }
                    accumulate(&mut grads, *logits, d);
                }
                Op::Sum(parts) => {
                    for &p in parts {
                        if self.tracked(p) {
                            accumulate(&mut grads, p, g.clone());
                        }
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, at: &Matrix) -> Matrix {
        let h = 1e-6;
        let mut out = Matrix::zeros(at.rows(), at.cols());
        for i in 0..at.data().len() {
            let mut plus = at.clone();
            plus.data_mut()[i] += h;
            let mut minus = at.clone();
            minus.data_mut()[i] -= h;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            assert!((x - y).abs() / denom < 1e-5 || (x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }

    #[test]
    fn chain_of_ops_matches_finite_differences() {
        let w = Matrix::from_rows(&[vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.6]]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.2, 0.1]]);
        let targets = Matrix::from_rows(&[vec![0.7, 0.2, 0.1], vec![0.0, 1.0, 0.0], vec![0.3, 0.3, 0.4]]);
        let build = |w: &Matrix, tape: &mut Tape| {
            let wv = tape.param("w", w);
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, wv);
            let n = tape.normalize_rows(h);
            let g = tape.sigmoid(n);
            let gate = tape.gather(g, &[0, 1, 2]);
            let col = tape.matmul_t(gate, gate);
            let sm = tape.causal_softmax_rows(col);
            let mixed = tape.matmul(sm, n);
            let mean = tape.mean_rows(mixed);
            let both = tape.concat_rows(&[mixed, mean]);
            let first = tape.gather(both, &[0, 1, 2]);
            let logits = tape.add_row(first, mean);
            tape.soft_cross_entropy(logits, targets.clone(), vec![0.5, 1.0, 0.25])
        };
        let mut tape = Tape::new();
        let root = build(&w, &mut tape);
        let grads = tape.backward(root);
        let numeric = numeric_grad(
            |w| {
                let mut t = Tape::new();
                let r = build(w, &mut t);
                t.scalar(r)
            },
            &w,
        );
        assert_close(&grads["w"], &numeric);
    }

    #[test]
    fn row_scale_and_transpose_gradients() {
        let a = Matrix::from_rows(&[vec![0.3, -1.2], vec![0.8, 0.4], vec![-0.5, 0.9]]);
        let build = |a: &Matrix, tape: &mut Tape| {
            let av = tape.param("a", a);
            let w = tape.constant(Matrix::from_rows(&[vec![0.7], vec![-0.3]]));
            let s = tape.matmul(av, w);
            let gate = tape.sigmoid(s);
            let pruned = tape.row_scale(av, gate);
            let st = tape.transpose(s);
            let attn = tape.softmax_rows(st);
            let pooled = tape.matmul(attn, pruned);
            let doubled = tape.scale(pooled, 2.0);
            let sum = tape.add(doubled, pooled);
            let tgt = Matrix::from_rows(&[vec![1.0, 0.0]]);
            let l1 = tape.soft_cross_entropy(sum, tgt, vec![1.0]);
            let l2 = tape.soft_cross_entropy(pooled, Matrix::from_rows(&[vec![0.5, 0.5]]), vec![2.0]);
            tape.sum(&[l1, l2])
        };
        let mut tape = Tape::new();
        let root = build(&a, &mut tape);
        let grads = tape.backward(root);
        let numeric = numeric_grad(
            |a| {
                let mut t = Tape::new();
                let r = build(a, &mut t);
                t.scalar(r)
            },
            &a,
        );
        assert_close(&grads["a"], &numeric);
    }

    #[test]
    fn frozen_tape_yields_no_gradients() {
        let mut tape = Tape::frozen();
        let p = tape.param("p", &Matrix::from_rows(&[vec![1.0, 2.0]]));
        let l = tape.soft_cross_entropy(p, Matrix::from_rows(&[vec![1.0, 0.0]]), vec![1.0]);
        assert!(tape.backward(l).is_empty());
    }

    #[test]
    fn param_leaf_is_cached_by_name() {
        let mut tape = Tape::new();
        let m = Matrix::from_rows(&[vec![1.0]]);
        let a = tape.param("x", &m);
        let b = tape.param("x", &m);
        assert_eq!(a, b);
        let s = tape.sum(&[a, b]);
        assert_eq!(tape.backward(s)["x"].get(0, 0), 2.0);
    }

    #[test]
    fn cross_entropy_never_nan_when_probability_underflows() {
        let mut tape = Tape::new();
        let z = tape.param("z", &Matrix::from_rows(&[vec![0.0, -1e4]]));
        let l = tape.soft_cross_entropy(z, Matrix::from_rows(&[vec![0.0, 1.0]]), vec![1.0]);
        assert!((tape.scalar(l) + LOG_EPS.ln()).abs() < 1e-9);
        let g = tape.backward(l);
        assert!(g["z"].is_finite());
    }
}
