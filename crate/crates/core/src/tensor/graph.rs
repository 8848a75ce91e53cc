//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read
//! in place from a [`ParamStore`]; [`Graph::backward`] accumulates their
//! gradients into a [`Gradients`] buffer.

use std::collections::HashMap;
use std::rc::Rc;

use super::mat::{gemm, Mat, View, ViewMut};
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Mat<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.values[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }
}

/// Gradient buffer shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub grads: Vec<Mat<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(Mat::fill_zero);
    }

    pub fn global_norm(&self) -> T {
        self.grads.iter().map(Mat::sum_sq).sum::<T>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: T) -> T {
        let norm = self.global_norm();
        if norm > max_norm {
            let s = max_norm / (norm + T::from_f64_lossy(1e-12));
            self.grads.iter_mut().for_each(|g| g.scale_in_place(s));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Mat::all_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which key positions each query position may attend to (row-major L x L).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub len: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(len: usize) -> Self {
        Self {
            len,
            allowed: vec![true; len * len],
        }
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.len + k]
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Dropout(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Mat<T>>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        softmax: Mat<T>,
    },
    Bce {
        logits: Var,
        targets: Mat<T>,
    },
    WeightedSum(Vec<(Var, T)>),
    Dot(Var, Mat<T>),
}

struct Node<T> {
    value: Option<Mat<T>>,
    op: Op<T>,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.shape(a);
        let (bk, bn) = self.shape(b);
        assert_eq!(ak, bk, "matmul inner dimension");
        let mut out = Mat::zeros(am, bn);
        gemm(
            T::one(),
            View::dense(&self.value(a).data, am, ak),
            View::dense(&self.value(b).data, bk, bn),
            T::zero(),
            ViewMut::dense(&mut out.data, am, bn),
        );
        self.push(out, Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (am, ak) = self.shape(a);
        let (bn, bk) = self.shape(b);
        assert_eq!(ak, bk, "matmul_nt inner dimension");
        let mut out = Mat::zeros(am, bn);
        gemm(
            T::one(),
            View::dense(&self.value(a).data, am, ak),
            View::dense_t(&self.value(b).data, bn, bk),
            T::zero(),
            ViewMut::dense(&mut out.data, am, bn),
        );
        self.push(out, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row shape");
        let mut out = self.value(a).clone();
        let bias = &self.value(row).data;
        for i in 0..r {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o = *o + *b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.scale_in_place(s);
        self.push(out, Op::Scale(a, s))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(a))
    }

    /// Inverted dropout with a precomputed keep mask (`keep[i]` is 0 or
    /// `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, keep: Vec<T>) -> Var {
        assert_eq!(keep.len(), self.value(a).len(), "dropout mask length");
        let mut out = self.value(a).clone();
        for (o, k) in out.data.iter_mut().zip(&keep) {
            *o = *o * *k;
        }
        self.push(out, Op::Dropout(a, keep))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm gamma");
        assert_eq!(self.shape(beta), (1, c), "layer_norm beta");
        let xv = self.value(x);
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let n = T::from_usize(c).expect("usize fits");
        let eps = T::from_f64_lossy(eps);
        let mut out = Mat::zeros(r, c);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out.data[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are `L x d`;
    /// head `h` uses columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Rc<AttentionMask>) -> Var {
        let (l, d) = self.shape(q);
        assert_eq!(self.shape(k), (l, d), "attention key shape");
        assert_eq!(self.shape(v), (l, d), "attention value shape");
        assert_eq!(mask.len, l, "attention mask size");
        assert_eq!(d % heads, 0, "hidden size divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).expect("usize fits").sqrt();
        let mut out = Mat::zeros(l, d);
        let mut probs = Vec::with_capacity(heads);
        {
            let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
            for h in 0..heads {
                let off = h * dh;
                let mut p = Mat::zeros(l, l);
                gemm(
                    scale,
                    View::new(&qv[off..], l, dh, d, 1),
                    View::new(&kv[off..], dh, l, 1, d),
                    T::zero(),
                    ViewMut::dense(&mut p.data, l, l),
                );
                for i in 0..l {
                    masked_softmax_row(p.row_mut(i), &mask.allowed[i * l..(i + 1) * l]);
                }
                gemm(
                    T::one(),
                    View::dense(&p.data, l, l),
                    View::new(&vv[off..], l, dh, d, 1),
                    T::zero(),
                    ViewMut::new(&mut out.data[off..], l, dh, d, 1),
                );
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Per-head attention probabilities of an attention node.
    pub fn attention_probs(&self, v: Var) -> &[Mat<T>] {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => probs,
            _ => panic!("not an attention node"),
        }
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, c, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Mat::zeros(r, total);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, r, "concat_cols row mismatch");
            for i in 0..r {
                out.row_mut(i)[off..off + m.cols].copy_from_slice(m.row(i));
            }
            off += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.rows, "slice_rows out of range");
        let out = Mat::from_vec(len, m.cols, m.data[start * m.cols..(start + len) * m.cols].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let m = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * m.cols);
        for &i in idx {
            data.extend_from_slice(m.row(i));
        }
        let out = Mat::from_vec(idx.len(), m.cols, data);
        self.push(out, Op::GatherRows(table, idx.to_vec()))
    }

    /// Sum over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows, targets.len(), "cross entropy targets");
        let mut softmax = m.clone();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = softmax.row_mut(i);
            let lse = log_sum_exp(row);
            total = total + lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        self.push(
            Mat::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
        )
    }

    /// Sum of elementwise binary cross-entropy with logits. Rows of
    /// `targets` may hold several positives.
    pub fn bce_sum(&mut self, logits: Var, targets: Mat<T>) -> Var {
        let m = self.value(logits);
        assert_eq!(m.shape(), targets.shape(), "bce targets shape");
        let total = m
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
            .sum();
        self.push(Mat::scalar(total), Op::Bce { logits, targets })
    }

    /// `sum_i w_i * x_i` over `1 x 1` inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for (v, w) in terms {
            assert_eq!(self.shape(*v), (1, 1), "weighted_sum takes scalars");
            total = total + *w * self.value(*v).data[0];
        }
        self.push(Mat::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// `sum(a .* w)` for a constant `w`.
    pub fn dot_const(&mut self, a: Var, w: Mat<T>) -> Var {
        assert_eq!(self.shape(a), w.shape(), "dot_const shape");
        let total = self.value(a).data.iter().zip(&w.data).map(|(&x, &y)| x * y).sum();
        self.push(Mat::scalar(total), Op::Dot(a, w))
    }

    /// Backpropagates from the scalar `loss`, adding parameter gradients to
    /// `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients<T>) {
        assert_eq!(self.shape(loss), (1, 1), "backward from a scalar");
        let mut adj: Vec<Option<Mat<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Mat::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.backprop_node(i, &g, &mut adj, grads);
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, adj: &mut [Option<Mat<T>>], grads: &mut Gradients<T>) {
        let acc = |adj: &mut [Option<Mat<T>>], v: Var, m: Mat<T>| match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&m),
            slot @ None => *slot = Some(m),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => grads.grads[id.0].add_assign(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.cols);
                let mut da = Mat::zeros(m, k);
                gemm(T::one(), View::dense(&g.data, m, n), View::dense_t(&bv.data, k, n), T::zero(), ViewMut::dense(&mut da.data, m, k));
                let mut db = Mat::zeros(k, n);
                gemm(T::one(), View::dense_t(&av.data, m, k), View::dense(&g.data, m, n), T::zero(), ViewMut::dense(&mut db.data, k, n));
                acc(adj, *a, da);
                acc(adj, *b, db);
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows, av.cols, bv.rows);
                let mut da = Mat::zeros(m, k);
                gemm(T::one(), View::dense(&g.data, m, n), View::dense(&bv.data, n, k), T::zero(), ViewMut::dense(&mut da.data, m, k));
                let mut db = Mat::zeros(n, k);
                gemm(T::one(), View::dense_t(&g.data, m, n), View::dense(&av.data, m, k), T::zero(), ViewMut::dense(&mut db.data, n, k));
                acc(adj, *a, da);
                acc(adj, *b, db);
            }
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut dr = Mat::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, v) in dr.data.iter_mut().zip(g.row(r)) {
                        *d = *d + *v;
                    }
                }
                acc(adj, *a, g.clone());
                acc(adj, *row, dr);
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_in_place(*s);
                acc(adj, *a, d);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                    *dv = *dv * gelu_grad(*xv);
                }
                acc(adj, *a, d);
            }
            Op::Dropout(a, keep) => {
                let mut d = g.clone();
                for (dv, k) in d.data.iter_mut().zip(keep) {
                    *dv = *dv * *k;
                }
                acc(adj, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = g.shape();
                let gam = &self.value(*gamma).data;
                let n = T::from_usize(c).expect("usize fits");
                let mut dx = Mat::zeros(r, c);
                let mut dg = Mat::zeros(1, c);
                let mut db = Mat::zeros(1, c);
                for i in 0..r {
                    let gr = g.row(i);
                    let hr = &xhat[i * c..(i + 1) * c];
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..c {
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                        dg.data[j] = dg.data[j] + gr[j] * hr[j];
                        db.data[j] = db.data[j] + gr[j];
                    }
                    let (m1, m2) = (sum_dh / n, sum_dh_h / n);
                    let out = dx.row_mut(i);
                    for j in 0..c {
                        out[j] = rstd[i] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                    }
                }
                acc(adj, *x, dx);
                acc(adj, *gamma, dg);
                acc(adj, *beta, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                ..
            } => {
                let (l, d) = g.shape();
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).expect("usize fits").sqrt();
                let (qv, kv, vv) = (&self.value(*q).data, &self.value(*k).data, &self.value(*v).data);
                let mut dq = Mat::zeros(l, d);
                let mut dk = Mat::zeros(l, d);
                let mut dv = Mat::zeros(l, d);
                let mut dp = Mat::zeros(l, l);
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    // dP = dO_h V_h^T
                    gemm(T::one(), View::new(&g.data[off..], l, dh, d, 1), View::new(&vv[off..], dh, l, 1, d), T::zero(), ViewMut::dense(&mut dp.data, l, l));
                    // dV_h = P^T dO_h
                    gemm(T::one(), View::dense_t(&p.data, l, l), View::new(&g.data[off..], l, dh, d, 1), T::zero(), ViewMut::new(&mut dv.data[off..], l, dh, d, 1));
                    for i in 0..l {
                        let pr = p.row(i);
                        let dr = dp.row_mut(i);
                        let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                        for (dv_, pv) in dr.iter_mut().zip(pr) {
                            *dv_ = *pv * (*dv_ - dot) * scale;
                        }
                    }
                    // dQ_h = dS K_h ; dK_h = dS^T Q_h
                    gemm(T::one(), View::dense(&dp.data, l, l), View::new(&kv[off..], l, dh, d, 1), T::zero(), ViewMut::new(&mut dq.data[off..], l, dh, d, 1));
                    gemm(T::one(), View::dense_t(&dp.data, l, l), View::new(&qv[off..], l, dh, d, 1), T::zero(), ViewMut::new(&mut dk.data[off..], l, dh, d, 1));
                }
                acc(adj, *q, dq);
                acc(adj, *k, dk);
                acc(adj, *v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let d = Mat::from_vec(r, c, g.data[start * c..(start + r) * c].to_vec());
                    acc(adj, *p, d);
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let mut d = Mat::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    acc(adj, *p, d);
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                d.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                acc(adj, *a, d);
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.shape(*table);
                let mut d = Mat::zeros(r, c);
                for (k, &row) in idx.iter().enumerate() {
                    for (dv, gv) in d.row_mut(row).iter_mut().zip(g.row(k)) {
                        *dv = *dv + *gv;
                    }
                }
                acc(adj, *table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let up = g.data[0];
                let mut d = softmax.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(i);
                    row[t] = row[t] - T::one();
                }
                d.scale_in_place(up);
                acc(adj, *logits, d);
            }
            Op::Bce { logits, targets } => {
                let up = g.data[0];
                let z = self.value(*logits);
                let mut d = Mat::zeros(z.rows, z.cols);
                for ((dv, &zv), &y) in d.data.iter_mut().zip(&z.data).zip(&targets.data) {
                    *dv = (sigmoid(zv) - y) * up;
                }
                acc(adj, *logits, d);
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    acc(adj, *v, Mat::scalar(g.data[0] * *w));
                }
            }
            Op::Dot(a, w) => {
                let mut d = w.clone();
                d.scale_in_place(g.data[0]);
                acc(adj, *a, d);
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Softmax over allowed entries; disallowed entries get exactly zero.
fn masked_softmax_row<T: Scalar>(row: &mut [T], allowed: &[bool]) {
    let mut max = T::neg_infinity();
    for (v, &ok) in row.iter().zip(allowed) {
        if ok && *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for (v, &ok) in row.iter_mut().zip(allowed) {
        *v = if ok { (*v - max).exp() } else { T::zero() };
        sum = sum + *v;
    }
    if sum > T::zero() {
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}
