//! A small reverse-mode tape over 2-D matrices.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order for gradient propagation. Parameter nodes borrow
//! their values from the [`ParamSet`] instead of copying them.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::params::ParamSet;
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_acc, matmul_at_acc, matmul_bt, matmul_bt_acc, Matrix, Scalar};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Constant,
    Param(usize),
    Gather { table: Var, ids: Vec<u32> },
    Add(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Attention(AttentionCache<T>),
    Dropout { x: Var, mask: Vec<T> },
    SelectRows { x: Var, rows: Vec<usize> },
}

struct AttentionCache<T> {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    scale: T,
    /// Softmax weights, `heads × n_q × n_k`.
    probs: Vec<T>,
}

struct Node<T> {
    // None for parameters, which live in the ParamSet
    value: Option<Matrix<T>>,
    op: Op<T>,
}

/// Which key positions a query may attend to.
#[derive(Debug, Clone, Copy)]
pub struct AttentionMask<'m> {
    /// Keys flagged `true` are hidden from every query.
    pub key_padding: Option<&'m [bool]>,
    /// Query `i` sees only keys `0..=i`.
    pub causal: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<(T, Rng)>,
}

/// Gradients for every tensor of a [`ParamSet`], aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Matrix<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ParamSet<T>) -> Self {
        Self {
            tensors: params.iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().map(Matrix::sum_squares).sum::<T>().sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm && norm > T::zero() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Enables dropout with probability `p` drawn from `rng`.
    pub fn with_dropout(mut self, p: f64, rng: Rng) -> Self {
        if p > 0.0 {
            self.dropout = Some((T::of(p), rng));
        }
        self
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(idx)) => self.params.get(*idx),
            (None, _) => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[idx] = Some(v);
        v
    }

    /// Rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the single-row `row` to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let mut out = self.value(x).clone();
        let r = self.value(row);
        assert_eq!(r.rows(), 1);
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.row(0)) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a), self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let out = matmul_bt(self.value(a), self.value(b));
        self.push(out, Op::MatMulBt(a, b))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gain).row(0);
        let b = self.value(bias).row(0);
        let mut out = Matrix::zeros(n, d);
        let mut xhat = Vec::with_capacity(n * d);
        let mut rstd = Vec::with_capacity(n);
        let dn = T::of(d as f64);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.set(i, j, h * g[j] + b[j]);
            }
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.as_mut_slice() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    /// Identity when dropout is disabled.
    pub fn dropout(&mut self, x: Var) -> Var {
        let Some((p, mut rng)) = self.dropout.take() else {
            return x;
        };
        let keep = T::one() / (T::one() - p);
        let mut out = self.value(x).clone();
        let mut mask = Vec::with_capacity(out.len());
        for v in out.as_mut_slice() {
            let m = if T::of(rng.random::<f64>()) < p { T::zero() } else { keep };
            mask.push(m);
            *v = *v * m;
        }
        self.dropout = Some((p, rng));
        self.push(out, Op::Dropout { x, mask })
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(out, Op::SelectRows { x, rows: rows.to_vec() })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values. Heads are contiguous column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttentionMask<'_>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let nk = kv.rows();
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = Matrix::zeros(nq, d);
        let mut scores = vec![T::zero(); nk];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let qi = &qv.row(i)[cols.clone()];
                let mut max = T::neg_infinity();
                for (j, s) in scores.iter_mut().enumerate() {
                    let hidden = (mask.causal && j > i) || mask.key_padding.is_some_and(|m| m[j]);
                    *s = if hidden {
                        T::neg_infinity()
                    } else {
                        qi.iter().zip(&kv.row(j)[cols.clone()]).map(|(&a, &b)| a * b).sum::<T>() * scale
                    };
                    max = max.max(*s);
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                if max == T::neg_infinity() {
                    continue;
                }
                let mut z = T::zero();
                for (pj, &s) in p.iter_mut().zip(&scores) {
                    *pj = if s == T::neg_infinity() { T::zero() } else { (s - max).exp() };
                    z = z + *pj;
                }
                let orow = &mut out.row_mut(i)[cols.clone()];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = *pj / z;
                    if *pj == T::zero() {
                        continue;
                    }
                    for (o, &vj) in orow.iter_mut().zip(&vv.row(j)[cols.clone()]) {
                        *o = *o + *pj * vj;
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention(AttentionCache {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            }),
        )
    }

    /// Propagates `seeds` (output gradients for some nodes) back to the
    /// parameters.
    pub fn backward(&self, seeds: Vec<(Var, Matrix<T>)>) -> Gradients<T> {
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.value(v).shape(), "seed gradient shape");
            accumulate(&mut grads, v, g);
        }
        let mut out = Gradients::zeros_like(self.params);
        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, g, &mut grads, &mut out);
        }
        out
    }

    fn propagate(&self, idx: usize, g: Matrix<T>, grads: &mut [Option<Matrix<T>>], out: &mut Gradients<T>) {
        match &self.nodes[idx].op {
            Op::Constant => {}
            Op::Param(p) => out.tensors[*p].add_assign(&g),
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (a, &b) in gt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::AddRow(x, row) => {
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (a, &b) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                accumulate(grads, *row, gr);
                accumulate(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                matmul_bt_acc(&g, bv, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                matmul_at_acc(av, &g, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                // Y = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let mut ga = Matrix::zeros(av.rows(), av.cols());
                matmul_acc(&g, bv, &mut ga);
                let mut gb = Matrix::zeros(bv.rows(), bv.cols());
                matmul_at_acc(&g, av, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gain_v = self.value(*gain).row(0);
                let (n, d) = g.shape();
                let dn = T::of(d as f64);
                let mut gx = Matrix::zeros(n, d);
                let mut gg = Matrix::zeros(1, d);
                let mut gb = Matrix::zeros(1, d);
                for i in 0..n {
                    let gy = g.row(i);
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                    }
                    mean_dxh = mean_dxh / dn;
                    mean_dxh_xh = mean_dxh_xh / dn;
                    let grow = gx.row_mut(i);
                    for j in 0..d {
                        let dxh = gy[j] * gain_v[j];
                        grow[j] = rstd[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                    let (ggr, gbr) = (gg.row_mut(0), gb.row_mut(0));
                    for j in 0..d {
                        ggr[j] = ggr[j] + gy[j] * xh[j];
                    }
                    for j in 0..d {
                        gbr[j] = gbr[j] + gy[j];
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gain, gg);
                accumulate(grads, *bias, gb);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut gx = g;
                for (gv, &v) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    *gv = *gv * gelu_grad(v);
                }
                accumulate(grads, *x, gx);
            }
            Op::Dropout { x, mask } => {
                let mut gx = g;
                for (gv, &m) in gx.as_mut_slice().iter_mut().zip(mask) {
                    *gv = *gv * m;
                }
                accumulate(grads, *x, gx);
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                for (i, &r) in rows.iter().enumerate() {
                    for (a, &b) in gx.row_mut(r).iter_mut().zip(g.row(i)) {
                        *a = *a + b;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attention(cache) => self.attention_backward(cache, &g, grads),
        }
    }

    fn attention_backward(&self, c: &AttentionCache<T>, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let (qv, kv, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (nq, d) = qv.shape();
        let nk = kv.rows();
        let dh = d / c.heads;
        let mut gq = Matrix::zeros(nq, d);
        let mut gk = Matrix::zeros(nk, d);
        let mut gv = Matrix::zeros(nk, d);
        let mut dp = vec![T::zero(); nk];
        for h in 0..c.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..nq {
                let p = &c.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let gi = &g.row(i)[cols.clone()];
                let mut dot = T::zero();
                for j in 0..nk {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    dp[j] = gi.iter().zip(&vv.row(j)[cols.clone()]).map(|(&a, &b)| a * b).sum();
                    dot = dot + p[j] * dp[j];
                    for (a, &b) in gv.row_mut(j)[cols.clone()].iter_mut().zip(gi) {
                        *a = *a + p[j] * b;
                    }
                }
                let qi = &qv.row(i)[cols.clone()];
                for j in 0..nk {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * c.scale;
                    for (a, &b) in gq.row_mut(i)[cols.clone()].iter_mut().zip(&kv.row(j)[cols.clone()]) {
                        *a = *a + ds * b;
                    }
                    for (a, &b) in gk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                        *a = *a + ds * b;
                    }
                }
            }
        }
        accumulate(grads, c.q, gq);
        accumulate(grads, c.k, gk);
        accumulate(grads, c.v, gv);
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let t = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
