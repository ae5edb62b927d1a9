//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Graph`] is built once per example: leaves borrow parameter matrices,
//! every operation stores its forward value plus whatever it needs for the
//! backward pass. Gradients are only propagated into nodes that transitively
//! depend on a trainable leaf, so frozen weights cost a forward pass and an
//! input-gradient pass but never a weight-gradient pass.

use std::borrow::Cow;

use crate::scalar::Scalar;
use crate::tensor::{t_matmul_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Optional adapter branch of an attention node: prompt keys and values of
/// shape `K x width` plus a `1 x heads` gate passed through `tanh`.
#[derive(Clone, Copy, Debug)]
pub struct AdapterInputs {
    pub keys: NodeId,
    pub values: NodeId,
    pub gate: NodeId,
}

struct AttentionCache<T> {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    causal: bool,
    probs: Vec<Matrix<T>>,
    adapter: Option<(AdapterInputs, Vec<Matrix<T>>)>,
}

enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Silu(NodeId),
    RmsNorm { x: NodeId, gain: NodeId, inv_rms: Vec<T> },
    Attention(Box<AttentionCache<T>>),
    Gather { table: NodeId, ids: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)>, probs: Vec<Vec<T>> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Matrix<T>>,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const RMS_EPS: f64 = 1e-6;

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Borrowed leaf. `trainable` marks it as a gradient sink.
    pub fn param(&mut self, m: &'a Matrix<T>, trainable: bool) -> NodeId {
        self.push(Cow::Borrowed(m), Op::Leaf, trainable)
    }

    /// Owned constant leaf.
    pub fn constant(&mut self, m: Matrix<T>) -> NodeId {
        self.push(Cow::Owned(m), Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Matrix<T>> {
        self.nodes[id.0].grad.take()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(v), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(v), Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Cow::Owned(v), Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, v.cols()), "bias shape mismatch");
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(Cow::Owned(v), Op::AddRow(a, bias), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x = *x * sigmoid(*x);
        }
        let rg = self.rg(&[a]);
        self.push(Cow::Owned(v), Op::Silu(a), rg)
    }

    /// Row-wise RMS normalization with a learned `1 x cols` gain.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        assert_eq!(g.shape(), (1, xv.cols()), "gain shape mismatch");
        let n = T::lit(xv.cols() as f64);
        let mut out = xv.clone();
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let ms = xv.row(r).iter().map(|&a| a * a).sum::<T>() / n;
            let inv = T::one() / (ms + T::lit(RMS_EPS)).sqrt();
            inv_rms.push(inv);
            for (o, &gj) in out.row_mut(r).iter_mut().zip(g.data()) {
                *o = *o * inv * gj;
            }
        }
        let rg = self.rg(&[x, gain]);
        self.push(Cow::Owned(out), Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (all `seq x width`).
    ///
    /// With an adapter, each head additionally attends to the prompt keys
    /// through a separate softmax whose output is scaled by `tanh(gate[h])`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        adapter: Option<AdapterInputs>,
    ) -> NodeId {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (t, w) = qv.shape();
        assert_eq!(kv.shape(), (t, w));
        assert_eq!(vv.shape(), (t, w));
        assert!(heads > 0 && w % heads == 0, "width not divisible by heads");
        let dh = w / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut out = Matrix::zeros(t, w);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &qv.row(i)[off..off + dh];
                let upto = if causal { i + 1 } else { t };
                let prow = p.row_mut(i);
                for (j, pj) in prow.iter_mut().enumerate().take(upto) {
                    *pj = crate::scalar::dot(qi, &kv.row(j)[off..off + dh]) * scale;
                }
                softmax_in_place(&mut prow[..upto]);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &pj) in prow.iter().enumerate().take(upto) {
                    for (o, &x) in orow.iter_mut().zip(&vv.row(j)[off..off + dh]) {
                        *o += pj * x;
                    }
                }
            }
            probs.push(p);
        }
        let mut adapter_cache = None;
        if let Some(ad) = adapter {
            let kp = self.value(ad.keys);
            let vp = self.value(ad.values);
            let gate = self.value(ad.gate);
            let kl = kp.rows();
            assert_eq!(kp.cols(), w);
            assert_eq!(vp.shape(), (kl, w));
            assert_eq!(gate.shape(), (1, heads));
            let mut bprobs = Vec::with_capacity(heads);
            for h in 0..heads {
                let off = h * dh;
                let gamma = gate.get(0, h).tanh();
                let mut b = Matrix::zeros(t, kl);
                for i in 0..t {
                    let qi = &qv.row(i)[off..off + dh];
                    let brow = b.row_mut(i);
                    for (p, bp) in brow.iter_mut().enumerate() {
                        *bp = crate::scalar::dot(qi, &kp.row(p)[off..off + dh]) * scale;
                    }
                    softmax_in_place(brow);
                    let orow = &mut out.row_mut(i)[off..off + dh];
                    for (p, &bp) in brow.iter().enumerate() {
                        let c = gamma * bp;
                        for (o, &x) in orow.iter_mut().zip(&vp.row(p)[off..off + dh]) {
                            *o += c * x;
                        }
                    }
                }
                bprobs.push(b);
            }
            adapter_cache = Some((ad, bprobs));
        }
        let mut deps = vec![q, k, v];
        if let Some(ad) = adapter {
            deps.extend([ad.keys, ad.values, ad.gate]);
        }
        let rg = self.rg(&deps);
        let cache = AttentionCache { q, k, v, heads, causal, probs, adapter: adapter_cache };
        self.push(Cow::Owned(out), Op::Attention(Box::new(cache)), rg)
    }

    /// Selects rows of `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let rg = self.rg(&[table]);
        self.push(Cow::Owned(out), Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat column mismatch");
            rows += m.rows();
            data.extend_from_slice(m.data());
        }
        let rg = self.rg(parts);
        self.push(Cow::Owned(Matrix::from_vec(rows, cols, data)), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Mean negative log-likelihood of `(row, token)` targets under the
    /// row-wise softmax of `logits`. Produces a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        assert!(!targets.is_empty(), "cross entropy needs at least one target");
        let lv = self.value(logits);
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(targets.len());
        for &(r, tok) in targets {
            let mut p = lv.row(r).to_vec();
            let target_logit = p[tok];
            let lse = log_sum_exp(&p);
            total += lse - target_logit;
            softmax_in_place(&mut p);
            probs.push(p);
        }
        let loss = total / T::lit(targets.len() as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Cow::Owned(Matrix::from_vec(1, 1, vec![loss])),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        )
    }

    /// Per-target negative log-likelihoods of a cross-entropy node.
    pub fn cross_entropy_terms(&self, id: NodeId) -> Option<Vec<T>> {
        match &self.nodes[id.0].op {
            Op::CrossEntropy { targets, probs, .. } => Some(
                targets.iter().zip(probs).map(|(&(_, tok), p)| -p[tok].ln()).collect(),
            ),
            _ => None,
        }
    }

    /// Backpropagates from a `1 x 1` node.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.nodes[root.0].grad = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[idx].grad.take() else { continue };
            let contributions = self.local_backward(idx, &gout);
            for (id, g) in contributions {
                self.accumulate(id, g);
            }
        }
    }

    fn accumulate(&mut self, id: NodeId, g: Matrix<T>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.add_assign(&g),
            None => node.grad = Some(g),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_backward(&self, idx: usize, gout: &Matrix<T>) -> Vec<(NodeId, Matrix<T>)> {
        let mut out = Vec::new();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, gout.matmul_t(self.value(*b))));
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let mut gb = Matrix::zeros(av.cols(), gout.cols());
                    t_matmul_acc(av, gout, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::MatMulT(a, b) => {
                if self.needs(*a) {
                    out.push((*a, gout.matmul(self.value(*b))));
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let mut gb = Matrix::zeros(gout.cols(), av.cols());
                    t_matmul_acc(gout, av, &mut gb);
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, gout.clone()));
                }
                if self.needs(*b) {
                    out.push((*b, gout.clone()));
                }
            }
            Op::AddRow(a, bias) => {
                if self.needs(*a) {
                    out.push((*a, gout.clone()));
                }
                if self.needs(*bias) {
                    let mut gb = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (s, &x) in gb.data_mut().iter_mut().zip(gout.row(r)) {
                            *s += x;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                let mut g = gout.clone();
                for (gi, &x) in g.data_mut().iter_mut().zip(av.data()) {
                    let s = sigmoid(x);
                    *gi *= s * (T::one() + x * (T::one() - s));
                }
                out.push((*a, g));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = T::lit(xv.cols() as f64);
                if self.needs(*x) {
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        let xr = xv.row(r);
                        let gr = gout.row(r);
                        let s: T = xr
                            .iter()
                            .zip(gv.data())
                            .zip(gr)
                            .map(|((&xi, &gi), &di)| xi * gi * di)
                            .sum();
                        let coef = inv * inv * inv * s / n;
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * gv.get(0, j) * gr[j] - xr[j] * coef;
                        }
                    }
                    out.push((*x, gx));
                }
                if self.needs(*gain) {
                    let mut gg = Matrix::zeros(1, xv.cols());
                    for r in 0..xv.rows() {
                        let inv = inv_rms[r];
                        for ((s, &xi), &di) in gg.data_mut().iter_mut().zip(xv.row(r)).zip(gout.row(r)) {
                            *s += xi * inv * di;
                        }
                    }
                    out.push((*gain, gg));
                }
            }
            Op::Attention(cache) => self.attention_backward(cache, gout, &mut out),
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(gout.row(r)) {
                        *o += x;
                    }
                }
                out.push((*table, gt));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.needs(p) {
                        let cols = gout.cols();
                        let slice = gout.data()[start * cols..(start + rows) * cols].to_vec();
                        out.push((p, Matrix::from_vec(rows, cols, slice)));
                    }
                    start += rows;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let up = gout.get(0, 0) / T::lit(targets.len() as f64);
                let mut gl = Matrix::zeros(lv.rows(), lv.cols());
                for (&(r, tok), p) in targets.iter().zip(probs) {
                    let row = gl.row_mut(r);
                    for (o, &pj) in row.iter_mut().zip(p) {
                        *o += up * pj;
                    }
                    row[tok] -= up;
                }
                out.push((*logits, gl));
            }
        }
        out
    }

    fn attention_backward(
        &self,
        c: &AttentionCache<T>,
        gout: &Matrix<T>,
        out: &mut Vec<(NodeId, Matrix<T>)>,
    ) {
        let qv = self.value(c.q);
        let kv = self.value(c.k);
        let vv = self.value(c.v);
        let (t, w) = qv.shape();
        let dh = w / c.heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut gq = Matrix::zeros(t, w);
        let mut gk = Matrix::zeros(t, w);
        let mut gv = Matrix::zeros(t, w);
        let mut dp = vec![T::zero(); t];
        for h in 0..c.heads {
            let off = h * dh;
            let p = &c.probs[h];
            for i in 0..t {
                let upto = if c.causal { i + 1 } else { t };
                let go = &gout.row(i)[off..off + dh];
                let prow = p.row(i);
                let mut sum = T::zero();
                for j in 0..upto {
                    let d = crate::scalar::dot(go, &vv.row(j)[off..off + dh]);
                    dp[j] = d;
                    sum += prow[j] * d;
                    for (o, &g) in gv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                        *o += prow[j] * g;
                    }
                }
                for j in 0..upto {
                    let ds = prow[j] * (dp[j] - sum) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kv.row(j)[off..off + dh];
                    for (o, &x) in gq.row_mut(i)[off..off + dh].iter_mut().zip(krow) {
                        *o += ds * x;
                    }
                    let qrow = &qv.row(i)[off..off + dh];
                    for (o, &x) in gk.row_mut(j)[off..off + dh].iter_mut().zip(qrow) {
                        *o += ds * x;
                    }
                }
            }
        }
        if let Some((ad, bprobs)) = &c.adapter {
            let kp = self.value(ad.keys);
            let vp = self.value(ad.values);
            let gate = self.value(ad.gate);
            let kl = kp.rows();
            let mut gkp = Matrix::zeros(kl, w);
            let mut gvp = Matrix::zeros(kl, w);
            let mut ggate = Matrix::zeros(1, c.heads);
            let mut db = vec![T::zero(); kl];
            for h in 0..c.heads {
                let off = h * dh;
                let gamma = gate.get(0, h).tanh();
                let b = &bprobs[h];
                let mut dgamma = T::zero();
                for i in 0..t {
                    let go = &gout.row(i)[off..off + dh];
                    let brow = b.row(i);
                    let mut sum = T::zero();
                    for p in 0..kl {
                        let d = crate::scalar::dot(go, &vp.row(p)[off..off + dh]);
                        dgamma += brow[p] * d;
                        db[p] = gamma * d;
                        sum += brow[p] * db[p];
                        for (o, &g) in gvp.row_mut(p)[off..off + dh].iter_mut().zip(go) {
                            *o += gamma * brow[p] * g;
                        }
                    }
                    for p in 0..kl {
                        let dt = brow[p] * (db[p] - sum) * scale;
                        if dt == T::zero() {
                            continue;
                        }
                        let krow = &kp.row(p)[off..off + dh];
                        for (o, &x) in gq.row_mut(i)[off..off + dh].iter_mut().zip(krow) {
                            *o += dt * x;
                        }
                        let qrow = &qv.row(i)[off..off + dh];
                        for (o, &x) in gkp.row_mut(p)[off..off + dh].iter_mut().zip(qrow) {
                            *o += dt * x;
                        }
                    }
                }
                ggate.set(0, h, dgamma * (T::one() - gamma * gamma));
            }
            if self.needs(ad.keys) {
                out.push((ad.keys, gkp));
            }
            if self.needs(ad.values) {
                out.push((ad.values, gvp));
            }
            if self.needs(ad.gate) {
                out.push((ad.gate, ggate));
            }
        }
        if self.needs(c.q) {
            out.push((c.q, gq));
        }
        if self.needs(c.k) {
            out.push((c.k, gk));
        }
        if self.needs(c.v) {
            out.push((c.v, gv));
        }
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Max-subtracted softmax.
pub fn softmax_in_place<T: Scalar>(xs: &mut [T]) {
    if xs.is_empty() {
        return;
    }
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in xs.iter_mut() {
        *x /= s;
    }
}

pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

/// Row-wise log-softmax.
pub fn log_softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let lse = log_sum_exp(row);
    row.iter().map(|&x| x - lse).collect()
}
