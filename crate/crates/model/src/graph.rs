//! Reverse-mode automatic differentiation over a linear tape of matrix ops.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and routes gradients to the parameters the
//! graph read. Parameters are referenced, not copied.

use std::cell::Cell;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Mat, View};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `b` may be a single row broadcast over the rows of `a`.
    Add(Var, Var),
    Mul(Var, Var),
    /// Multiplies by a 1×1 variable.
    MulScalar(Var, Var),
    Affine(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        probs: Vec<Mat>,
    },
    /// `mask ⊙ (w · dist + b)` for scalar `w`, `b`.
    DistanceBias {
        dist: Mat,
        mask: Mat,
        w: Var,
        b: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
    },
    BceLogits {
        logits: Var,
        targets: Mat,
    },
}

struct Node {
    value: Option<Mat>,
    op: Op,
}

/// Multiply counts accumulated by forward ops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCount {
    /// Score and value products of attention whose queries and keys are the
    /// same sequence.
    pub self_attention: u64,
    /// Score and value products of attention across two sequences.
    pub cross_attention: u64,
    /// Everything else (projections, feed-forward layers).
    pub other: u64,
}

impl MulCount {
    pub fn total(&self) -> u64 {
        self.self_attention + self.cross_attention + self.other
    }

    pub fn attention(&self) -> u64 {
        self.self_attention + self.cross_attention
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    self_attention_muls: Cell<u64>,
    cross_attention_muls: Cell<u64>,
    other_muls: Cell<u64>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            self_attention_muls: Cell::new(0),
            cross_attention_muls: Cell::new(0),
            other_muls: Cell::new(0),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn mul_count(&self) -> MulCount {
        MulCount {
            self_attention: self.self_attention_muls.get(),
            cross_attention: self.cross_attention_muls.get(),
            other: self.other_muls.get(),
        }
    }

    pub fn reset_mul_count(&self) {
        self.self_attention_muls.set(0);
        self.cross_attention_muls.set(0);
        self.other_muls.set(0);
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `x W + b` with `W` of shape in×out.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let (wv, bv) = (self.param(w), b.map(|b| self.param(b)));
        self.linear_vars(x, wv, bv)
    }

    pub fn linear_vars(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.cols, wm.rows, "linear: input width {} vs weight rows {}", xm.cols, wm.rows);
        let (n, k, o) = (xm.rows, xm.cols, wm.cols);
        let mut out = Mat::zeros(n, o);
        if let Some(b) = b {
            let bm = self.value(b);
            assert_eq!(bm.shape(), (1, o), "linear bias shape");
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bm.data);
            }
        }
        gemm(n, k, o, 1.0, View::of(xm), View::of(wm), 1.0, &mut out.data, 0, o);
        self.other_muls.set(self.other_muls.get() + (n * k * o) as u64);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "add: column mismatch");
        let mut out = am.clone();
        if bm.rows == am.rows {
            out.add_assign(bm);
        } else {
            assert_eq!(bm.rows, 1, "add: rows must match or broadcast a single row");
            for r in 0..out.rows {
                for (o, x) in out.row_mut(r).iter_mut().zip(&bm.data) {
                    *o += x;
                }
            }
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "mul: shape mismatch");
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(am.rows, am.cols, data);
        self.push(out, Op::Mul(a, b))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|x| x * sv).collect());
        self.push(out, Op::MulScalar(a, s))
    }

    /// `alpha * a + beta` elementwise for constants `alpha`, `beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|x| alpha * x + beta).collect());
        self.push(out, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|x| gelu(*x)).collect());
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|x| sigmoid(*x)).collect());
        self.push(out, Op::Sigmoid(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let (g, b) = (self.param(gamma), self.param(beta));
        let (xm, gm, bm) = (self.value(x), self.value(g), self.value(b));
        let (n, d) = xm.shape();
        assert_eq!(gm.shape(), (1, d), "layer norm gain shape");
        let mut xhat = Mat::zeros(n, d);
        let mut out = Mat::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * gm.data[c] + bm.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma: g, beta: b, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values, with an optional additive score bias shared
    /// by all heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize) -> Var {
        self.attention_over(q, k, v, bias, heads, q == k)
    }

    /// [`Graph::attention`] with an explicit note of whether queries and keys
    /// come from the same sequence, which only affects the multiply counters.
    pub fn attention_over(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        heads: usize,
        same_sequence: bool,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qm.shape();
        let m = km.rows;
        assert_eq!(km.cols, d, "attention: key width");
        assert_eq!(vm.shape(), (m, d), "attention: value shape");
        assert!(heads > 0 && d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        let bm = bias.map(|b| self.value(b));
        if let Some(bm) = bm {
            assert_eq!(bm.shape(), (n, m), "attention: bias shape");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut s = match bm {
                Some(b) => b.clone(),
                None => Mat::zeros(n, m),
            };
            gemm(n, dh, m, scale, View::cols(qm, h * dh, false), View::cols(km, h * dh, true), 1.0, &mut s.data, 0, m);
            softmax_rows(&mut s);
            gemm(n, m, dh, 1.0, View::of(&s), View::cols(vm, h * dh, false), 0.0, &mut out.data, h * dh, d);
            probs.push(s);
        }
        let counter = if same_sequence { &self.self_attention_muls } else { &self.cross_attention_muls };
        counter.set(counter.get() + (2 * n * m * d) as u64);
        self.push(out, Op::Attention { q, k, v, bias, heads, probs })
    }

    pub fn distance_bias(&mut self, dist: Mat, mask: Mat, w: ParamId, b: ParamId) -> Var {
        assert_eq!(dist.shape(), mask.shape(), "distance bias: mask shape");
        let (wv, bv) = (self.param(w), self.param(b));
        let (ws, bs) = (self.value(wv).item(), self.value(bv).item());
        let data = dist.data.iter().zip(&mask.data).map(|(d, m)| m * (ws * d + bs)).collect();
        let out = Mat::from_vec(dist.rows, dist.cols, data);
        self.push(out, Op::DistanceBias { dist, mask, w: wv, b: bv })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let m = self.value(*p);
            assert_eq!(m.rows, rows, "concat_cols: height mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let am = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * am.cols);
        for &i in idx {
            data.extend_from_slice(am.row(i));
        }
        let out = Mat::from_vec(idx.len(), am.cols, data);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let am = self.value(a);
        assert!(am.rows > 0, "mean of zero rows");
        let mut out = Mat::zeros(1, am.cols);
        for r in 0..am.rows {
            for (o, x) in out.data.iter_mut().zip(am.row(r)) {
                *o += x;
            }
        }
        let n = am.rows as f64;
        out.data.iter_mut().for_each(|o| *o /= n);
        self.push(out, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Mat::scalar(s), Op::SumAll(a))
    }

    /// Adds 1×1 variables.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let cat = self.concat_rows(parts);
        self.sum_all(cat)
    }

    /// Mean softmax cross-entropy of each row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "cross entropy: one target per row");
        let mut probs = lm.clone();
        softmax_rows(&mut probs);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lm.cols, "cross entropy: target out of range");
            let row = lm.row(r);
            loss += log_sum_exp(row) - row[t];
        }
        loss /= targets.len().max(1) as f64;
        self.push(Mat::scalar(loss), Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    /// Mean binary cross-entropy with logits over every element.
    pub fn bce_logits(&mut self, logits: Var, targets: Mat) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.shape(), targets.shape(), "bce: target shape");
        let loss =
            lm.data.iter().zip(&targets.data).map(|(x, t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()).sum::<f64>()
                / lm.len().max(1) as f64;
        self.push(Mat::scalar(loss), Op::BceLogits { logits, targets })
    }

    /// Gradients of the scalar `loss` with respect to every parameter read
    /// by this graph.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Mat::scalar(1.0));
        let mut out = Grads::new(self.params.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads, &mut out);
        }
        out
    }

    fn backprop(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>], out: &mut Grads) {
        let acc = |grads: &mut [Option<Mat>], v: Var, m: Mat| match &mut grads[v.0] {
            Some(e) => e.add_assign(&m),
            slot => *slot = Some(m),
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.accumulate(*id, g),
            Op::Linear { x, w, b } => {
                let (xm, wm) = (self.value(*x), self.value(*w));
                let (n, k, o) = (xm.rows, xm.cols, wm.cols);
                let mut dx = Mat::zeros(n, k);
                gemm(n, o, k, 1.0, View::of(g), View::t(wm), 0.0, &mut dx.data, 0, k);
                let mut dw = Mat::zeros(k, o);
                gemm(k, n, o, 1.0, View::t(xm), View::of(g), 0.0, &mut dw.data, 0, o);
                acc(grads, *x, dx);
                acc(grads, *w, dw);
                if let Some(b) = b {
                    acc(grads, *b, col_sums(g));
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                if self.value(*b).rows == g.rows {
                    acc(grads, *b, g.clone());
                } else {
                    acc(grads, *b, col_sums(g));
                }
            }
            Op::Mul(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let da = g.data.iter().zip(&bm.data).map(|(g, y)| g * y).collect();
                let db = g.data.iter().zip(&am.data).map(|(g, x)| g * x).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, da));
                acc(grads, *b, Mat::from_vec(g.rows, g.cols, db));
            }
            Op::MulScalar(a, s) => {
                let (am, sv) = (self.value(*a), self.value(*s).item());
                let ds = g.data.iter().zip(&am.data).map(|(g, x)| g * x).sum();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, g.data.iter().map(|g| g * sv).collect()));
                acc(grads, *s, Mat::scalar(ds));
            }
            Op::Affine(a, alpha) => {
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, g.data.iter().map(|g| g * alpha).collect()));
            }
            Op::Gelu(a) => {
                let am = self.value(*a);
                let d = g.data.iter().zip(&am.data).map(|(g, x)| g * gelu_grad(*x)).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.as_ref().expect("sigmoid value");
                let d = g.data.iter().zip(&y.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gm = self.value(*gamma);
                let (n, d) = xhat.shape();
                let mut dx = Mat::zeros(n, d);
                let mut dg = Mat::zeros(1, d);
                let mut db = Mat::zeros(1, d);
                for r in 0..n {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for c in 0..d {
                        let dh = gr[c] * gm.data[c];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[c];
                        dg.data[c] += gr[c] * hr[c];
                        db.data[c] += gr[c];
                    }
                    let is = inv_std[r];
                    let inv_d = 1.0 / d as f64;
                    for c in 0..d {
                        let dh = gr[c] * gm.data[c];
                        dx.data[r * d + c] = is * (dh - inv_d * sum_dh - hr[c] * inv_d * sum_dh_h);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gamma, dg);
                acc(grads, *beta, db);
            }
            Op::Attention { q, k, v, bias, heads, probs } => {
                let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = qm.shape();
                let m = km.rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros(n, d);
                let mut dk = Mat::zeros(m, d);
                let mut dv = Mat::zeros(m, d);
                let mut dbias = bias.map(|_| Mat::zeros(n, m));
                let mut dp = Mat::zeros(n, m);
                for (h, p) in probs.iter().enumerate() {
                    let off = h * dh;
                    // dP = G_h V_hᵀ
                    gemm(n, dh, m, 1.0, View::cols(g, off, false), View::cols(vm, off, true), 0.0, &mut dp.data, 0, m);
                    // dV_h = Pᵀ G_h
                    gemm(m, n, dh, 1.0, View::t(p), View::cols(g, off, false), 0.0, &mut dv.data, off, d);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    for r in 0..n {
                        let pr = &p.data[r * m..(r + 1) * m];
                        let dr = &mut dp.data[r * m..(r + 1) * m];
                        let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                        for (x, pv) in dr.iter_mut().zip(pr) {
                            *x = pv * (*x - dot);
                        }
                    }
                    if let Some(db) = &mut dbias {
                        db.add_assign(&dp);
                    }
                    gemm(n, m, dh, scale, View::of(&dp), View::cols(km, off, false), 0.0, &mut dq.data, off, d);
                    gemm(m, n, dh, scale, View::t(&dp), View::cols(qm, off, false), 0.0, &mut dk.data, off, d);
                }
                acc(grads, *q, dq);
                acc(grads, *k, dk);
                acc(grads, *v, dv);
                if let (Some(b), Some(db)) = (bias, dbias) {
                    acc(grads, *b, db);
                }
            }
            Op::DistanceBias { dist, mask, w, b } => {
                let mut dw = 0.0;
                let mut db = 0.0;
                for ((g, d), m) in g.data.iter().zip(&dist.data).zip(&mask.data) {
                    dw += g * m * d;
                    db += g * m;
                }
                acc(grads, *w, Mat::scalar(dw));
                acc(grads, *b, Mat::scalar(db));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let slice = g.data[start * c..(start + r) * c].to_vec();
                    acc(grads, *p, Mat::from_vec(r, c, slice));
                    start += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let mut m = Mat::zeros(r, c);
                    for row in 0..r {
                        m.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                    }
                    acc(grads, *p, m);
                    off += c;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut m = Mat::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, x) in m.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(grads, *a, m);
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut m = Mat::zeros(r, c);
                for row in 0..r {
                    for (o, x) in m.row_mut(row).iter_mut().zip(&g.data) {
                        *o = x / r as f64;
                    }
                }
                acc(grads, *a, m);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                acc(grads, *a, Mat::from_vec(r, c, vec![g.item(); r * c]));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / targets.len().max(1) as f64;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.data[r * d.cols + t] -= 1.0;
                }
                d.data.iter_mut().for_each(|x| *x *= scale);
                acc(grads, *logits, d);
            }
            Op::BceLogits { logits, targets } => {
                let lm = self.value(*logits);
                let scale = g.item() / lm.len().max(1) as f64;
                let d = lm.data.iter().zip(&targets.data).map(|(x, t)| (sigmoid(*x) - t) * scale).collect();
                acc(grads, *logits, Mat::from_vec(lm.rows, lm.cols, d));
            }
        }
    }
}

pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &mut Mat) {
    let c = m.cols;
    for r in 0..m.rows {
        let row = &mut m.data[r * c..(r + 1) * c];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        row.iter_mut().for_each(|x| *x /= s);
    }
}

fn col_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, x) in out.data.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}
