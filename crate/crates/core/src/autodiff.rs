//! A small reverse-mode tape over dense matrices.
//!
//! Every forward pass in the model builds a [`Graph`]. Parameter leaves borrow
//! their values from a [`ParamStore`] so building a graph never copies weights.
//! Only parameters marked trainable (and anything computed from them, or from
//! inputs created with `requires_grad`) receive gradients.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Gather {
        param: ParamId,
        ids: Vec<usize>,
        padding: Option<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    MaskRows {
        x: Var,
        keep: Vec<bool>,
    },
    SumAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: T,
        norm_b: T,
    },
    CrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    trainable: Vec<bool>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Matrix<T>>>,
    nodes: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            params: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    /// Gradient of a parameter; `None` if it was frozen or unused.
    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix<T>> {
        self.params.get_mut(id.index()).and_then(Option::as_mut)
    }

    pub fn set_param(&mut self, id: ParamId, grad: Matrix<T>) {
        self.params[id.index()] = Some(grad);
    }

    /// Gradient with respect to an input node created with `requires_grad`.
    pub fn wrt(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Adds another set of parameter gradients into this one.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.params.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// Graph in which every parameter is trainable.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_trainable(params, vec![true; params.len()])
    }

    /// Graph that records values only; `backward` yields no parameter gradients.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_trainable(params, vec![false; params.len()])
    }

    pub fn with_trainable(params: &'p ParamStore<T>, trainable: Vec<bool>) -> Self {
        assert_eq!(trainable.len(), params.len(), "trainable mask length");
        Self {
            params,
            trainable,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.as_slice()[0]
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input leaf whose gradient is retrievable via [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.trainable[id.index()],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(v);
        v
    }

    /// Row lookup into a parameter table. Rows equal to `padding` receive no gradient.
    pub fn gather(&mut self, table: ParamId, ids: &[usize], padding: Option<usize>) -> Var {
        let src = self.params.value(table);
        let cols = src.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let value = Matrix::from_vec(ids.len(), cols, data);
        let rg = self.trainable[table.index()];
        self.push(
            value,
            Op::Gather {
                param: table,
                ids: ids.to_vec(),
                padding,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(bias));
        assert_eq!(bm.rows(), 1, "bias must be a row vector");
        assert_eq!(am.cols(), bm.cols(), "bias width mismatch");
        let mut value = am.clone();
        for i in 0..value.rows() {
            for (x, &b) in value.row_mut(i).iter_mut().zip(bm.as_slice()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(value, Op::AddConst(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` get exactly zero weight.
    ///
    /// Panics if every column is masked.
    pub fn softmax_rows(&mut self, a: Var, key_mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(mask) = key_mask {
            assert_eq!(mask.len(), x.cols(), "key mask length");
            assert!(mask.iter().any(|&m| m), "softmax over fully masked row");
        }
        let mut value = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            softmax_into(x.row(i), key_mask, value.row_mut(i));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Per-row layer normalisation with learned gain and bias (`1 × c` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        assert_eq!(g.len(), cols, "layer norm gain width");
        assert_eq!(b.len(), cols, "layer norm bias width");
        let n = T::lit(cols as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                value[(i, j)] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(xm.rows(), len);
        for i in 0..xm.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&xm.row(i)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(value, Op::SliceCols { x, start }, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xm = self.value(x);
        assert!(start + len <= xm.rows(), "slice_rows out of range");
        let c = xm.cols();
        let value = Matrix::from_vec(len, c, xm.as_slice()[start * c..(start + len) * c].to_vec());
        let rg = self.rg(x);
        self.push(value, Op::SliceRows { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pm = self.value(p);
                assert_eq!(pm.rows(), rows, "concat_cols row mismatch");
                let w = pm.cols();
                value.row_mut(i)[off..off + w].copy_from_slice(pm.row(i));
                off += w;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pm = self.value(p);
            assert_eq!(pm.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(pm.as_slice());
            rows += pm.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshape(rows, cols);
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Zeroes every row `i` with `keep[i] == false`.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(keep.len(), value.rows(), "row mask length");
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                value.row_mut(i).fill(T::zero());
            }
        }
        let rg = self.rg(x);
        self.push(
            value,
            Op::MaskRows {
                x,
                keep: keep.to_vec(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xm = self.value(x);
        let mut value = xm.clone();
        let mut norms = Vec::with_capacity(xm.rows());
        for i in 0..xm.rows() {
            let n = dot(xm.row(i), xm.row(i)).sqrt();
            norms.push(n);
            let row = value.row_mut(i);
            if n > T::zero() {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.fill(T::zero());
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Cosine similarity of two row vectors, as a `1 × 1` node. Panics on zero norm.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.rows(), 1, "cosine expects row vectors");
        assert_eq!(am.shape(), bm.shape(), "cosine shape mismatch");
        let norm_a = dot(am.as_slice(), am.as_slice()).sqrt();
        let norm_b = dot(bm.as_slice(), bm.as_slice()).sqrt();
        assert!(
            norm_a > T::zero() && norm_b > T::zero(),
            "cosine of zero-norm vector"
        );
        let c = dot(am.as_slice(), bm.as_slice()) / (norm_a * norm_b);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Matrix::filled(1, 1, c),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            },
            rg,
        )
    }

    /// `-log softmax(logits)[class]` for a `1 × C` logit row.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), 1, "cross entropy expects a logit row");
        assert!(class < lm.cols(), "class index out of range");
        let mut probs = vec![T::zero(); lm.cols()];
        softmax_into(lm.as_slice(), None, &mut probs);
        let max = lm
            .as_slice()
            .iter()
            .copied()
            .fold(T::neg_infinity(), T::max);
        let lse = max
            + lm.as_slice()
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<T>()
                .ln();
        let loss = lse - lm.as_slice()[class];
        let rg = self.rg(logits);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                class,
                probs,
            },
            rg,
        )
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        let mut param_grads: Vec<Option<Matrix<T>>> = vec![None; self.params.len()];
        grads[output.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => accumulate(&mut param_grads[id.index()], g),
                Op::Gather {
                    param,
                    ids,
                    padding,
                } => {
                    let table = self.params.value(*param);
                    let slot = param_grads[param.index()]
                        .get_or_insert_with(|| Matrix::zeros(table.rows(), table.cols()));
                    for (r, &id) in ids.iter().enumerate() {
                        if Some(id) == *padding {
                            continue;
                        }
                        for (d, &s) in slot.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let d = g.matmul_t(self.value(*b));
                        accumulate(&mut grads[a.0], d);
                    }
                    if self.rg(*b) {
                        let d = self.value(*a).t_matmul(&g);
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let d = g.matmul(self.value(*b));
                        accumulate(&mut grads[a.0], d);
                    }
                    if self.rg(*b) {
                        let d = g.t_matmul(self.value(*a));
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.rg(*bias) {
                        let mut d = Matrix::zeros(1, g.cols());
                        for i in 0..g.rows() {
                            for (s, &v) in d.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], d);
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads[b.0], g.map(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let d = g.zip_map(self.value(*b), |x, y| x * y);
                        accumulate(&mut grads[a.0], d);
                    }
                    if self.rg(*b) {
                        let d = g.zip_map(self.value(*a), |x, y| x * y);
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads[a.0], g.map(|v| v * s));
                }
                Op::AddConst(a) => accumulate(&mut grads[a.0], g),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("value");
                    let d = g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g.zip_map(x, |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = dot(yr, gr);
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = yr[j] * (gr[j] - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gm = self.value(*gamma).as_slice();
                    if self.rg(*gamma) {
                        let mut d = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for j in 0..cols {
                                d[(0, j)] += g[(i, j)] * xhat[(i, j)];
                            }
                        }
                        accumulate(&mut grads[gamma.0], d);
                    }
                    if self.rg(*beta) {
                        let mut d = Matrix::zeros(1, cols);
                        for i in 0..rows {
                            for (s, &v) in d.as_mut_slice().iter_mut().zip(g.row(i)) {
                                *s += v;
                            }
                        }
                        accumulate(&mut grads[beta.0], d);
                    }
                    if self.rg(*x) {
                        let n = T::lit(cols as f64);
                        let mut d = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for j in 0..cols {
                                let dh = g[(i, j)] * gm[j];
                                mean_dh += dh;
                                mean_dh_h += dh * xhat[(i, j)];
                            }
                            mean_dh /= n;
                            mean_dh_h /= n;
                            for j in 0..cols {
                                let dh = g[(i, j)] * gm[j];
                                d[(i, j)] = inv_std[i] * (dh - mean_dh - xhat[(i, j)] * mean_dh_h);
                            }
                        }
                        accumulate(&mut grads[x.0], d);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    let w = g.cols();
                    for i in 0..rows {
                        d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::SliceRows { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut d = Matrix::zeros(rows, cols);
                    d.as_mut_slice()[start * cols..start * cols + g.len()]
                        .copy_from_slice(g.as_slice());
                    accumulate(&mut grads[x.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, w) = self.shape(p);
                        if self.rg(p) {
                            let mut d = Matrix::zeros(rows, w);
                            for i in 0..rows {
                                d.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                            }
                            accumulate(&mut grads[p.0], d);
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        if self.rg(p) {
                            let d = Matrix::from_vec(
                                rows,
                                cols,
                                g.as_slice()[off * cols..(off + rows) * cols].to_vec(),
                            );
                            accumulate(&mut grads[p.0], d);
                        }
                        off += rows;
                    }
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.shape(*x);
                    accumulate(&mut grads[x.0], g.reshape(rows, cols));
                }
                Op::MaskRows { x, keep } => {
                    let mut d = g;
                    for (i, &k) in keep.iter().enumerate() {
                        if !k {
                            d.row_mut(i).fill(T::zero());
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::SumAll(x) => {
                    let (rows, cols) = self.shape(*x);
                    let s = g.as_slice()[0];
                    accumulate(&mut grads[x.0], Matrix::filled(rows, cols, s));
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("value");
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for (i, &n) in norms.iter().enumerate() {
                        if n <= T::zero() {
                            continue;
                        }
                        let (yr, gr) = (y.row(i), g.row(i));
                        let proj = dot(yr, gr);
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = (gr[j] - yr[j] * proj) / n;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::Cosine {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    let s = g.as_slice()[0];
                    let c = node.value.as_ref().expect("value").as_slice()[0];
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let denom = *norm_a * *norm_b;
                    if self.rg(*a) {
                        let na2 = *norm_a * *norm_a;
                        let d = bm.zip_map(am, |bv, av| s * (bv / denom - c * av / na2));
                        accumulate(&mut grads[a.0], d);
                    }
                    if self.rg(*b) {
                        let nb2 = *norm_b * *norm_b;
                        let d = am.zip_map(bm, |av, bv| s * (av / denom - c * bv / nb2));
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    class,
                    probs,
                } => {
                    let s = g.as_slice()[0];
                    let mut d = probs.clone();
                    d[*class] -= T::one();
                    d.iter_mut().for_each(|v| *v *= s);
                    accumulate(&mut grads[logits.0], Matrix::row_vector(d));
                }
            }
        }

        Gradients {
            params: param_grads,
            nodes: grads,
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, delta: Matrix<T>) {
    match slot {
        Some(existing) => existing.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable softmax of `x` into `out`; masked entries are set to zero.
pub fn softmax_into<T: Scalar>(x: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|&(j, _)| keep(j))
        .map(|(_, &v)| v)
        .fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (j, o) in out.iter_mut().enumerate() {
        *o = if keep(j) {
            (x[j] - max).exp()
        } else {
            T::zero()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let w = store.insert(
            "w",
            ParamGroup::Text,
            Matrix::from_vec(1, 2, vec![1.0, 2.0]),
        );
        let v = store.insert(
            "v",
            ParamGroup::Image,
            Matrix::from_vec(1, 2, vec![3.0, 4.0]),
        );
        let mut g = Graph::with_trainable(&store, store.mask_for(&[ParamGroup::Text]));
        let (wv, vv) = (g.param(w), g.param(v));
        let prod = g.mul(wv, vv);
        let s = g.sum_all(prod);
        let grads = g.backward(s);
        assert_eq!(grads.param(w).unwrap().as_slice(), &[3.0, 4.0]);
        assert!(grads.param(v).is_none());
    }

    #[test]
    fn gather_skips_padding_row() {
        let mut store = ParamStore::<f64>::new();
        let t = store.insert(
            "t",
            ParamGroup::Text,
            Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]),
        );
        let mut g = Graph::new(&store);
        let rows = g.gather(t, &[0, 2, 2, 1], Some(0));
        let s = g.sum_all(rows);
        let grads = g.backward(s);
        assert_eq!(grads.param(t).unwrap().as_slice(), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_masked_columns() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::from_vec(1, 3, vec![0.3, 100.0, -0.2]));
        let y = g.softmax_rows(x, Some(&[true, false, true]));
        let out = g.value(y).as_slice();
        assert_eq!(out[1], 0.0);
        assert!((out[0] + out[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Matrix::zeros(1, 4));
        let ce = g.cross_entropy(x, 2);
        assert!((g.scalar(ce) - 4f64.ln()).abs() < 1e-15);
    }
}
