//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters are
//! referenced by id rather than copied, so a tape is cheap to build per
//! example. Gradients flow through frozen parameters; the tape simply does not
//! materialize a gradient for a frozen leaf.

use super::mat::{gelu, gelu_grad, sigmoid, softplus, Mat};
use super::param::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
    Place(Vec<(Var, usize, usize)>),
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Mat, inv_std: Vec<f64> },
    AttnProbs { q: Var, k: Var, bias: Option<Var>, scale: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Mat },
    BceWithLogits { logits: Var, targets: Mat },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
}

enum Value {
    Owned(Mat),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Grads {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::with_capacity(1024), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Grads::var`].
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let trainable = self.store.get(id).trainable();
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x / y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Div(a, b), ng)
    }

    /// Adds the 1×c `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "add_row expects a 1x{} row", am.cols());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Multiplies every row of `a` elementwise by the 1×c `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(row));
        assert_eq!(rm.shape(), (1, am.cols()), "mul_row expects a 1x{} row", am.cols());
        let mut out = am.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(rm.as_slice()) {
                *o *= b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(Mat::filled(self.shape(a).0, self.shape(a).1, c));
        self.add(a, k)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        let ng = self.ng(&[a]);
        self.push(out, Op::Abs(a), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::min);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Minimum(a, b), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), f64::max);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Maximum(a, b), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(&[a]);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let out = {
            let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
            Mat::concat_rows(&mats)
        };
        let ng = self.ng(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let out = {
            let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
            Mat::concat_cols(&mats)
        };
        let ng = self.ng(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshape(rows, cols);
        let ng = self.ng(&[a]);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means as a 1×c row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.rows() as f64;
        let mut out = Mat::zeros(1, m.cols());
        for r in 0..m.rows() {
            for (o, v) in out.as_mut_slice().iter_mut().zip(m.row(r)) {
                *o += v / n;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let out = self.value(table).gather_rows(idx);
        let ng = self.ng(&[table]);
        self.push(out, Op::GatherRows(table, idx.to_vec()), ng)
    }

    /// `template` with each part added at its (row, col) offset.
    pub fn place(&mut self, template: Mat, parts: &[(Var, usize, usize)]) -> Var {
        let mut out = template;
        for &(p, r0, c0) in parts {
            let pm = self.value(p);
            assert!(r0 + pm.rows() <= out.rows() && c0 + pm.cols() <= out.cols(), "place out of range");
            for r in 0..pm.rows() {
                for (o, v) in out.row_mut(r0 + r)[c0..c0 + pm.cols()].iter_mut().zip(pm.row(r)) {
                    *o += v;
                }
            }
        }
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&vars);
        self.push(out, Op::Place(parts.to_vec()), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (normed, inv_std) = super::mat::normalize_rows(self.value(x), eps);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut out = normed.clone();
        for r in 0..out.rows() {
            for ((o, gg), bb) in out.row_mut(r).iter_mut().zip(g.as_slice()).zip(b.as_slice()) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(out, Op::LayerNorm { x, gamma, beta, normed, inv_std }, ng)
    }

    /// Row-wise `softmax(scale · q kᵀ + bias)`.
    ///
    /// Keys whose bias is `-inf` are skipped entirely and receive exactly zero
    /// weight, so the cost of a row is proportional to its receptive field.
    pub fn attn_probs(&mut self, q: Var, k: Var, bias: Option<Var>, scale: f64) -> Result<Var> {
        let (qm, km) = (self.value(q), self.value(k));
        if qm.cols() != km.cols() {
            return Err(shape_err("attn_probs", qm.cols(), km.cols()));
        }
        let (n, m) = (qm.rows(), km.rows());
        let bm = bias.map(|b| self.value(b));
        if let Some(b) = bm {
            if b.shape() != (n, m) {
                return Err(shape_err("attn_probs bias", (n, m), b.shape()));
            }
        }
        let out = softmax_rows_masked(qm, km, bm, scale)?;
        let mut ins = vec![q, k];
        ins.extend(bias);
        let ng = self.ng(&ins);
        Ok(self.push(out, Op::AttnProbs { q, k, bias, scale }, ng))
    }

    /// `Σ_i w_i · CE(logits_i, target_i)` as a 1×1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lm = self.value(logits);
        assert_eq!(targets.len(), lm.rows(), "one target per row");
        assert_eq!(weights.len(), lm.rows(), "one weight per row");
        let mut probs = Mat::zeros(lm.rows(), lm.cols());
        let mut loss = 0.0;
        for r in 0..lm.rows() {
            let row = lm.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            for (p, x) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            loss += weights[r] * (lse - row[targets[r]]);
        }
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            ng,
        )
    }

    /// `Σ softplus(x) − t·x`, the summed binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.shape(), targets.shape(), "bce target shape");
        let loss: f64 = lm.as_slice().iter().zip(targets.as_slice()).map(|(&x, &t)| softplus(x) - t * x).sum();
        let ng = self.ng(&[logits]);
        self.push(Mat::scalar(loss), Op::BceWithLogits { logits, targets }, ng)
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        let mut out = xm.clone();
        let mut norms = Vec::with_capacity(xm.rows());
        for r in 0..xm.rows() {
            let n = xm.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm);
            }
            for o in out.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, ng))
    }

    /// Reverse pass from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut params: Vec<Option<Mat>> = vec![None; self.store.len()];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(node, &g, &mut grads);
            match node.op {
                Op::Param(id) => params[id.index()] = Some(g),
                Op::Leaf => grads[idx] = Some(g),
                _ => {}
            }
        }
        Grads { nodes: grads, params }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| self.value(v);
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if ng(*a) {
                    self.acc(grads, *a, g.matmul_nt(val(*b)));
                }
                if ng(*b) {
                    self.acc(grads, *b, val(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a bᵀ: da = g b, db = gᵀ a
                if ng(*a) {
                    self.acc(grads, *a, g.matmul(val(*b)));
                }
                if ng(*b) {
                    self.acc(grads, *b, g.matmul_tn(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if ng(*b) {
                    self.acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                if ng(*a) {
                    self.acc(grads, *a, g.zip_map(val(*b), |x, y| x / y));
                }
                if ng(*b) {
                    let out = self.node_value(node);
                    let gb = g.zip_map(out, |x, o| x * o).zip_map(val(*b), |x, y| -x / y);
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if ng(*row) {
                    self.acc(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rm = val(*row);
                if ng(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        for (x, &s) in ga.row_mut(r).iter_mut().zip(rm.as_slice()) {
                            *x *= s;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if ng(*row) {
                    self.acc(grads, *row, column_sums(&g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|x| x * s)),
            Op::Gelu(a) => self.acc(grads, *a, g.zip_map(val(*a), |x, y| x * gelu_grad(y))),
            Op::Relu(a) => self.acc(grads, *a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Sigmoid(a) => {
                let out = self.node_value(node);
                self.acc(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s)));
            }
            Op::Abs(a) => self.acc(grads, *a, g.zip_map(val(*a), |x, y| x * y.signum() * (y != 0.0) as u8 as f64)),
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let out = self.node_value(node);
                let am = val(*a);
                // ties route to `a`
                let take_a = out.zip_map(am, |o, x| (o == x) as u8 as f64);
                if ng(*a) {
                    self.acc(grads, *a, g.zip_map(&take_a, |x, t| x * t));
                }
                if ng(*b) {
                    self.acc(grads, *b, g.zip_map(&take_a, |x, t| x * (1.0 - t)));
                }
            }
            Op::SliceRows(a, start) => {
                if ng(*a) {
                    let am = val(*a);
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    let c = am.cols();
                    ga.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
                    self.acc(grads, *a, ga);
                }
            }
            Op::SliceCols(a, start) => {
                if ng(*a) {
                    let am = val(*a);
                    let mut ga = Mat::zeros(am.rows(), am.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if ng(p) {
                        self.acc(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if ng(p) {
                        self.acc(grads, p, g.slice_cols(off, cols));
                    }
                    off += cols;
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, g.clone().reshape(r, c));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.acc(grads, *a, Mat::filled(r, c, g.as_slice()[0]));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    for (x, &gg) in ga.row_mut(i).iter_mut().zip(g.as_slice()) {
                        *x = gg / r as f64;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::GatherRows(table, idx) => {
                if ng(*table) {
                    let tm = val(*table);
                    let mut gt = Mat::zeros(tm.rows(), tm.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, &gg) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += gg;
                        }
                    }
                    self.acc(grads, *table, gt);
                }
            }
            Op::Place(parts) => {
                for &(p, r0, c0) in parts {
                    if ng(p) {
                        let (r, c) = val(p).shape();
                        let mut gp = Mat::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(r0 + i)[c0..c0 + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, inv_std } => {
                let gm = val(*gamma);
                if ng(*gamma) {
                    self.acc(grads, *gamma, column_sums(&g.zip_map(normed, |a, b| a * b)));
                }
                if ng(*beta) {
                    self.acc(grads, *beta, column_sums(g));
                }
                if ng(*x) {
                    let n = g.cols() as f64;
                    let mut gx = Mat::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let dxhat: Vec<f64> = g.row(r).iter().zip(gm.as_slice()).map(|(a, b)| a * b).collect();
                        let xh = normed.row(r);
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let is = inv_std[r];
                        for ((o, d), xv) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
                            *o = is / n * (n * d - s1 - xv * s2);
                        }
                    }
                    self.acc(grads, *x, gx);
                }
            }
            Op::AttnProbs { q, k, bias, scale } => {
                let w = self.node_value(node);
                let mut dl = Mat::zeros(w.rows(), w.cols());
                for r in 0..w.rows() {
                    let wr = w.row(r);
                    let gr = g.row(r);
                    let inner: f64 = wr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &ww), &gg) in dl.row_mut(r).iter_mut().zip(wr).zip(gr) {
                        if ww != 0.0 {
                            *o = ww * (gg - inner);
                        }
                    }
                }
                if let Some(b) = bias {
                    if ng(*b) {
                        self.acc(grads, *b, dl.clone());
                    }
                }
                if ng(*q) {
                    let mut gq = dl.matmul(val(*k));
                    gq.scale_in_place(*scale);
                    self.acc(grads, *q, gq);
                }
                if ng(*k) {
                    let mut gk = dl.matmul_tn(val(*q));
                    gk.scale_in_place(*scale);
                    self.acc(grads, *k, gk);
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let s = g.as_slice()[0];
                let mut gl = probs.clone();
                for r in 0..gl.rows() {
                    gl[(r, targets[r])] -= 1.0;
                    for x in gl.row_mut(r) {
                        *x *= weights[r] * s;
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::BceWithLogits { logits, targets } => {
                let s = g.as_slice()[0];
                let gl = val(*logits).zip_map(targets, |x, t| s * (sigmoid(x) - t));
                self.acc(grads, *logits, gl);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = self.node_value(node);
                let mut gx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let d: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gg - yy * d) / norms[r];
                    }
                }
                self.acc(grads, *x, gx);
            }
        }
    }

    fn node_value<'a>(&'a self, node: &'a Node) -> &'a Mat {
        match &node.value {
            Value::Owned(m) => m,
            Value::Param(id) => self.store.value(*id),
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.as_mut_slice().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// Masked softmax kernel shared by the tape op and the plain attention
/// function. Returns `AllMaskedRow` when a row has no finite logit.
pub(crate) fn softmax_rows_masked(q: &Mat, k: &Mat, bias: Option<&Mat>, scale: f64) -> Result<Mat> {
    let (n, m) = (q.rows(), k.rows());
    let mut out = Mat::zeros(n, m);
    let mut live: Vec<usize> = Vec::with_capacity(m);
    for r in 0..n {
        live.clear();
        match bias {
            Some(b) => live.extend(b.row(r).iter().enumerate().filter(|(_, x)| **x != f64::NEG_INFINITY).map(|(j, _)| j)),
            None => live.extend(0..m),
        }
        if live.is_empty() {
            return Err(Error::AllMaskedRow { row: r });
        }
        let qr = q.row(r);
        let orow = out.row_mut(r);
        let mut mx = f64::NEG_INFINITY;
        for &j in &live {
            let mut l = scale * super::mat::dot(qr, k.row(j));
            if let Some(b) = bias {
                l += b[(r, j)];
            }
            orow[j] = l;
            mx = mx.max(l);
        }
        let mut z = 0.0;
        for &j in &live {
            let e = (orow[j] - mx).exp();
            orow[j] = e;
            z += e;
        }
        for &j in &live {
            orow[j] /= z;
        }
    }
    Ok(out)
}
