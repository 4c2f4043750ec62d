//! Reverse-mode differentiation over an explicit tape.
//!
//! Every primitive appends one node holding its forward value and the
//! handles it needs for the backward sweep. `backward` walks the tape in
//! reverse, so accumulation across reused nodes is plain summation.

#![allow(clippy::needless_range_loop)]

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean `rows x cols` pattern; `true` marks an entry that takes part in a
/// row-wise softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            allowed: vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                allowed.push(f(i, j));
            }
        }
        Mask { rows, cols, allowed }
    }

    /// Lower-triangular pattern: row `i` sees columns `0..=i`.
    pub fn causal(n: usize) -> Self {
        Mask::from_fn(n, n, |i, j| j <= i)
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.cols + j]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    ScaleRows(Var, Var),
    Affine(Var, f64),
    ConcatCols(Vec<Var>),
    Relu(Var),
    Tanh(Var),
    MaskedSoftmax(Var, Rc<Mask>),
    MaskedLogSoftmax(Var, Rc<Mask>),
    RowMax(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    WeightedSum(Var, Rc<Tensor>),
    Sum(Var),
    Mean(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input that receives a gradient (used by checks on raw functions).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Param(id), true)
    }

    /// Copies the current value of `v` as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Adds a `1 x m` bias to every row of an `n x m` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(format!(
                "bias {:?} for input {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[k % m];
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias(x, bias), ng))
    }

    /// Multiplies row `i` of `x` by `scale[i]`, where `scale` is `n x 1`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        if sv.cols() != 1 || sv.rows() != xv.rows() {
            return Err(Error::shape(format!(
                "row scale {:?} for input {:?}",
                sv.shape(),
                xv.shape()
            )));
        }
        let m = xv.cols();
        let mut out = xv.clone();
        for (k, o) in out.data_mut().iter_mut().enumerate() {
            *o *= sv.data()[k / m];
        }
        let ng = self.ng(x) || self.ng(scale);
        Ok(self.push(out, Op::ScaleRows(x, scale), ng))
    }

    /// `a * x + b`, elementwise.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        let ng = self.ng(x);
        self.push(out, Op::Affine(x, a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != rows {
                return Err(Error::shape(format!("concat rows {} vs {rows}", t.rows())));
            }
            cols += t.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Row-wise softmax restricted to the allowed entries of `mask`; masked
    /// entries are exactly zero. A fully masked row is all zeros.
    pub fn masked_softmax(&mut self, x: Var, mask: Rc<Mask>) -> Result<Var> {
        let xv = self.value(x);
        check_mask(xv, &mask)?;
        let [n, m] = xv.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = xv.row_slice(i);
            let Some(mx) = max_allowed(row, &mask, i) else {
                continue;
            };
            let mut z = 0.0;
            for j in 0..m {
                if mask.is_allowed(i, j) {
                    let e = (row[j] - mx).exp();
                    out.set(i, j, e);
                    z += e;
                }
            }
            for j in 0..m {
                if mask.is_allowed(i, j) {
                    out.set(i, j, out.get(i, j) / z);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedSoftmax(x, mask), ng))
    }

    /// Row-wise log-softmax over allowed entries; masked entries read as zero.
    pub fn masked_log_softmax(&mut self, x: Var, mask: Rc<Mask>) -> Result<Var> {
        let xv = self.value(x);
        check_mask(xv, &mask)?;
        let [n, m] = xv.shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            let row = xv.row_slice(i);
            let Some(mx) = max_allowed(row, &mask, i) else {
                continue;
            };
            let z: f64 = (0..m)
                .filter(|&j| mask.is_allowed(i, j))
                .map(|j| (row[j] - mx).exp())
                .sum();
            let lse = mx + z.ln();
            for j in 0..m {
                if mask.is_allowed(i, j) {
                    out.set(i, j, row[j] - lse);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedLogSoftmax(x, mask), ng))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let [n, m] = self.value(x).shape();
        self.masked_log_softmax(x, Rc::new(Mask::full(n, m)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let [n, m] = self.value(x).shape();
        self.masked_softmax(x, Rc::new(Mask::full(n, m)))
    }

    /// Row maxima as an `n x 1` column. Ties resolve to the lowest index.
    pub fn row_max(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.rows();
        let mut arg = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row_slice(i);
            let k = argmax(row);
            arg.push(k);
            data.push(row[k]);
        }
        let out = Tensor::new(n, 1, data).expect("column shape");
        let ng = self.ng(x);
        self.push(out, Op::RowMax(x, arg), ng)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, m] = xv.shape();
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let nrm = xv
                .row_slice(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(nrm);
            for j in 0..m {
                out.set(i, j, xv.get(i, j) / nrm);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormalizeRows(x, norms), ng)
    }

    /// `sum_ij w_ij * x_ij` with constant weights, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.same_shape(&weights, "weighted_sum")?;
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(x, Rc::new(weights)), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `sum_k w_k * x_k` over same-shaped operands.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = terms.first().ok_or_else(|| Error::shape("empty linear combination"))?;
        let mut out = Tensor::zeros(self.value(*first).rows(), self.value(*first).cols());
        for (v, w) in terms {
            let t = self.value(*v);
            out.same_shape(t, "lin_comb")?;
            for (o, x) in out.data_mut().iter_mut().zip(t.data()) {
                *o += w * x;
            }
        }
        let ng = terms.iter().any(|(v, _)| self.ng(*v));
        Ok(self.push(out, Op::LinComb(terms.to_vec()), ng))
    }

    /// Mean cross-entropy of logit rows against labels; rows labelled `None`
    /// are ignored. Returns a zero constant when no row is labelled.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let [n, k] = self.value(logits).shape();
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for {n} logit rows", labels.len())));
        }
        let count = labels.iter().flatten().count();
        if count == 0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let mut w = Tensor::zeros(n, k);
        for (i, y) in labels.iter().enumerate() {
            if let Some(y) = *y {
                if y >= k {
                    return Err(Error::invalid(format!("label {y} out of range for {k} classes")));
                }
                w.set(i, y, -1.0 / count as f64);
            }
        }
        let ls = self.log_softmax(logits)?;
        self.weighted_sum(ls, w)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and adds the gradients of every parameter leaf into `store`.
    pub fn backward_into(&self, output: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(output)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_t(bv)?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, av.transpose().matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(bv)?);
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.transpose().matmul(av)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*b) {
                    let m = g.cols();
                    let mut db = Tensor::zeros(1, m);
                    for r in 0..g.rows() {
                        for (d, v) in db.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::ScaleRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let m = xv.cols();
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for (k, d) in dx.data_mut().iter_mut().enumerate() {
                        *d *= sv.data()[k / m];
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.ng(*s) {
                    let data = (0..xv.rows())
                        .map(|r| xv.row_slice(r).iter().zip(g.row_slice(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *s, Tensor::new(xv.rows(), 1, data)?);
                }
            }
            Op::Affine(x, a) => self.accumulate(grads, *x, g.map(|v| a * v)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.ng(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, *p, Tensor::new(pv.rows(), w, d)?);
                    }
                    offset += w;
                }
            }
            Op::Relu(x) => {
                let dx = self.value(*x).zip_map(g, |v, d| if v > 0.0 { d } else { 0.0 })?;
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = node.value.zip_map(g, |y, d| d * (1.0 - y * y))?;
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedSoftmax(x, mask) => {
                let y = &node.value;
                let [n, m] = y.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let dot: f64 = (0..m)
                        .filter(|&j| mask.is_allowed(i, j))
                        .map(|j| y.get(i, j) * g.get(i, j))
                        .sum();
                    for j in 0..m {
                        if mask.is_allowed(i, j) {
                            dx.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedLogSoftmax(x, mask) => {
                let y = &node.value;
                let [n, m] = y.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let gsum: f64 = (0..m).filter(|&j| mask.is_allowed(i, j)).map(|j| g.get(i, j)).sum();
                    for j in 0..m {
                        if mask.is_allowed(i, j) {
                            dx.set(i, j, g.get(i, j) - y.get(i, j).exp() * gsum);
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::RowMax(x, arg) => {
                let [n, m] = self.value(*x).shape();
                let mut dx = Tensor::zeros(n, m);
                for (i, &k) in arg.iter().enumerate() {
                    dx.set(i, k, g.get(i, 0));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = &node.value;
                let [n, m] = y.shape();
                let mut dx = Tensor::zeros(n, m);
                for i in 0..n {
                    let dot: f64 = y.row_slice(i).iter().zip(g.row_slice(i)).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx.set(i, j, (g.get(i, j) - y.get(i, j) * dot) / norms[i]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedSum(x, w) => {
                let gs = g.item();
                self.accumulate(grads, *x, w.map(|v| v * gs));
            }
            Op::Sum(x) => {
                let [n, m] = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(n, m, g.item()));
            }
            Op::Mean(x) => {
                let [n, m] = self.value(*x).shape();
                let v = g.item() / (n * m) as f64;
                self.accumulate(grads, *x, Tensor::filled(n, m, v));
            }
            Op::LinComb(terms) => {
                for (v, w) in terms {
                    self.accumulate(grads, *v, g.map(|d| w * d));
                }
            }
        }
        Ok(())
    }
}

fn check_mask(x: &Tensor, mask: &Mask) -> Result<()> {
    if x.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "mask {:?} for input {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    Ok(())
}

fn max_allowed(row: &[f64], mask: &Mask, i: usize) -> Option<f64> {
    row.iter()
        .enumerate()
        .filter(|(j, _)| mask.is_allowed(i, *j))
        .map(|(_, &v)| v)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}
