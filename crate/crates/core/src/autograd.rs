//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass together with the
//! intermediate values its backward rule needs. [`Tape::backward`] then
//! walks the record in reverse, accumulating vector-Jacobian products.
//! Operations are coarse (an affine map, a whole multi-head attention, a
//! layer norm) so a transformer forward pass is a few dozen nodes.
//!
//! Parameters enter the tape through [`Tape::param`], which binds each
//! [`ParamId`] at most once; every use of a parameter therefore shares a
//! single node and its gradient is the sum over all uses.

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{gemm_acc, Tensor};

/// Additive logit offset for keys a query may not see.
pub const MASK_FILL: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        nq: usize,
        nk: usize,
        probs: Vec<f64>,
    },
    SosShift {
        emb: Var,
        sos: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl Tape {
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

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.bound.len() < store.len() {
            self.bound.resize(store.len(), None);
        }
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), &[]);
        self.bound[id.index()] = Some(v);
        v
    }

    /// `x · w + b` over the last axis of `x`; `w` is `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if wv.rank() != 2 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.outer_len();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut y = Tensor::zeros(&shape);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape(format!(
                    "linear: bias {:?} vs output width {dout}",
                    bv.shape()
                )));
            }
            for r in 0..rows {
                y.row_mut(r).copy_from_slice(bv.data());
            }
        }
        gemm_acc(rows, din, dout, xv.data(), false, wv.data(), false, y.data_mut());
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(y, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut y = av.clone();
        y.add_assign(bv);
        Ok(self.push(y, Op::Add(a, b), &[a, b]))
    }

    /// Adds a constant broadcast over leading axes (its length must divide
    /// the length of `a`).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if c.is_empty() || !av.len().is_multiple_of(c.len()) {
            return Err(Error::shape(format!(
                "add_const: {:?} does not tile {:?}",
                c.shape(),
                av.shape()
            )));
        }
        let mut y = av.clone();
        for chunk in y.data_mut().chunks_mut(c.len()) {
            for (x, d) in chunk.iter_mut().zip(c.data()) {
                *x += d;
            }
        }
        Ok(self.push(y, Op::AddConst(a), &[a]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let y = self.value(a).map(|x| x * factor);
        self.push(y, Op::Scale(a, factor), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(gelu);
        self.push(y, Op::Gelu(a), &[a])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(Error::shape("layer_norm: affine width mismatch"));
        }
        let rows = xv.outer_len();
        let mut y = Tensor::zeros(xv.shape());
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            let out = y.row_mut(r);
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[i] = h * g.data()[i] + b.data()[i];
            }
        }
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q: [B × nq × D]`, `k, v: [B × nk × D]`. Heads split `D` evenly.
    /// Masked keys receive [`MASK_FILL`] before the softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Mask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.rank() != 3 || kv.rank() != 3 || kv.shape() != vv.shape() {
            return Err(Error::shape("attention expects [B × N × D] operands"));
        }
        let (b, nq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let nk = kv.shape()[1];
        if kv.shape()[0] != b || kv.shape()[2] != d {
            return Err(Error::shape(format!(
                "attention: query {:?} vs key {:?}",
                qv.shape(),
                kv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide width {d}")));
        }
        if mask.size() != nq || nq != nk {
            return Err(Error::shape(format!(
                "mask of size {} for {nq} queries and {nk} keys",
                mask.size()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = Tensor::zeros(&[b, nq, d]);
        let mut probs = vec![0.0; b * heads * nq * nk];
        let mut scores = vec![0.0; nk];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..nq {
                    let qrow = &qd[(bi * nq + i) * d + off..(bi * nq + i) * d + off + dh];
                    let mrow = mask.row(i);
                    // With any key visible, masked weights underflow to
                    // exactly zero, so they are skipped.
                    let skip = mrow.contains(&true);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..nk {
                        if skip && !mrow[j] {
                            scores[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let krow = &kd[(bi * nk + j) * d + off..(bi * nk + j) * d + off + dh];
                        let mut s = dot(qrow, krow) * scale;
                        if !mrow[j] {
                            s += MASK_FILL;
                        }
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let p = &mut probs[((bi * heads + h) * nq + i) * nk..][..nk];
                    let mut total = 0.0;
                    for j in 0..nk {
                        p[j] = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        total += p[j];
                    }
                    let orow = &mut out.data_mut()[(bi * nq + i) * d + off..][..dh];
                    for j in 0..nk {
                        p[j] /= total;
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vrow = &vd[(bi * nk + j) * d + off..][..dh];
                        for c in 0..dh {
                            orow[c] += p[j] * vrow[c];
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                nq,
                nk,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Attention weights `[B × heads × nq × nk]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Prepends `sos` to `emb: [B × N × D]` and drops the last position.
    pub fn sos_shift(&mut self, emb: Var, sos: Var) -> Result<Var> {
        let ev = self.value(emb);
        let sv = self.value(sos);
        if ev.rank() != 3 || sv.len() != ev.shape()[2] {
            return Err(Error::shape(format!(
                "sos_shift: embeddings {:?} vs sos {:?}",
                ev.shape(),
                sv.shape()
            )));
        }
        let (b, n, d) = (ev.shape()[0], ev.shape()[1], ev.shape()[2]);
        let mut y = Tensor::zeros(ev.shape());
        for bi in 0..b {
            y.row_mut(bi * n).copy_from_slice(sv.data());
            for j in 1..n {
                let src = &ev.data()[(bi * n + j - 1) * d..(bi * n + j) * d];
                y.row_mut(bi * n + j).copy_from_slice(src);
            }
        }
        Ok(self.push(y, Op::SosShift { emb, sos }, &[emb, sos]))
    }

    /// Coordinate-wise maximum over axis 1 of `x: [B × M × D]`, giving `[B × D]`.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[1] == 0 {
            return Err(Error::shape("max_pool expects non-empty [B × M × D]"));
        }
        let (b, m, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut y = Tensor::zeros(&[b, d]);
        let mut argmax = vec![0; b * d];
        for bi in 0..b {
            for c in 0..d {
                let mut best = 0;
                let mut best_val = f64::NEG_INFINITY;
                for r in 0..m {
                    let val = xv.data()[(bi * m + r) * d + c];
                    if val > best_val {
                        best_val = val;
                        best = r;
                    }
                }
                y.data_mut()[bi * d + c] = best_val;
                argmax[bi * d + c] = best;
            }
        }
        Ok(self.push(y, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Mean squared error against a constant target of identical shape.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!(
                "mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let n = pv.len().max(1) as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B × K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - max).exp() / total;
            }
            loss += total.ln() + max - row[label];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    /// Reverse pass from a scalar node. Returns one entry per parameter of
    /// `store`; parameters the loss does not depend on have no gradient.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor>> = vec![None; store.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = &mut param_grads[id.index()];
                    match slot {
                        Some(existing) => existing.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.outer_len();
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(xv.shape());
                        gemm_acc(rows, dout, din, g.data(), false, wv.data(), true, dx.data_mut());
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*w) {
                        let mut dw = Tensor::zeros(wv.shape());
                        gemm_acc(din, rows, dout, xv.data(), true, g.data(), false, dw.data_mut());
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = Tensor::zeros(self.value(*b).shape());
                            for r in 0..rows {
                                for (acc, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                                    *acc += v;
                                }
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddConst(a) | Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut dx = g;
                    for (d, &x) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= gelu_grad(x);
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = g.last_dim();
                    let rows = g.outer_len();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = Tensor::zeros(self.value(*gamma).shape());
                    let mut dbeta = Tensor::zeros(self.value(*beta).shape());
                    let mut dx = Tensor::zeros(g.shape());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for i in 0..d {
                            dgamma.data_mut()[i] += gr[i] * hr[i];
                            dbeta.data_mut()[i] += gr[i];
                            dxhat[i] = gr[i] * gam[i];
                            mean_dh += dxhat[i];
                            mean_dh_h += dxhat[i] * hr[i];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let out = dx.row_mut(r);
                        for i in 0..d {
                            out[i] = rstd[r] * (dxhat[i] - mean_dh - hr[i] * mean_dh_h);
                        }
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gamma) {
                        accumulate(&mut grads, *gamma, dgamma);
                    }
                    if self.needs(*beta) {
                        accumulate(&mut grads, *beta, dbeta);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    nq,
                    nk,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (b, d) = (qv.shape()[0], qv.shape()[2]);
                    let (nq, nk, heads) = (*nq, *nk, *heads);
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Tensor::zeros(qv.shape());
                    let mut dk = Tensor::zeros(kv.shape());
                    let mut dv = Tensor::zeros(vv.shape());
                    let mut dp = vec![0.0; nk];
                    for bi in 0..b {
                        for h in 0..heads {
                            let off = h * dh;
                            for i in 0..nq {
                                let p = &probs[((bi * heads + h) * nq + i) * nk..][..nk];
                                let go = &g.data()[(bi * nq + i) * d + off..][..dh];
                                let mut weighted = 0.0;
                                for j in 0..nk {
                                    if p[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let vrow = &vv.data()[(bi * nk + j) * d + off..][..dh];
                                    dp[j] = dot(go, vrow);
                                    weighted += p[j] * dp[j];
                                    let dvrow = &mut dv.data_mut()[(bi * nk + j) * d + off..][..dh];
                                    for c in 0..dh {
                                        dvrow[c] += p[j] * go[c];
                                    }
                                }
                                let qrow_start = (bi * nq + i) * d + off;
                                for j in 0..nk {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - weighted) * scale;
                                    let krow_start = (bi * nk + j) * d + off;
                                    for c in 0..dh {
                                        dq.data_mut()[qrow_start + c] += ds * kv.data()[krow_start + c];
                                        dk.data_mut()[krow_start + c] += ds * qv.data()[qrow_start + c];
                                    }
                                }
                            }
                        }
                    }
                    if self.needs(*q) {
                        accumulate(&mut grads, *q, dq);
                    }
                    if self.needs(*k) {
                        accumulate(&mut grads, *k, dk);
                    }
                    if self.needs(*v) {
                        accumulate(&mut grads, *v, dv);
                    }
                }
                Op::SosShift { emb, sos } => {
                    let shape = self.value(*emb).shape().to_vec();
                    let (b, n, d) = (shape[0], shape[1], shape[2]);
                    let mut demb = Tensor::zeros(&shape);
                    let mut dsos = Tensor::zeros(self.value(*sos).shape());
                    for bi in 0..b {
                        for (acc, x) in dsos.data_mut().iter_mut().zip(g.row(bi * n)) {
                            *acc += x;
                        }
                        for j in 1..n {
                            demb.row_mut(bi * n + j - 1).copy_from_slice(g.row(bi * n + j));
                        }
                    }
                    let _ = d;
                    if self.needs(*emb) {
                        accumulate(&mut grads, *emb, demb);
                    }
                    if self.needs(*sos) {
                        accumulate(&mut grads, *sos, dsos);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (m, d) = (shape[1], shape[2]);
                    let mut dx = Tensor::zeros(&shape);
                    for (idx, &r) in argmax.iter().enumerate() {
                        let (bi, c) = (idx / d, idx % d);
                        dx.data_mut()[(bi * m + r) * d + c] += g.data()[idx];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Mse { pred, target } => {
                    let pv = self.value(*pred);
                    let factor = 2.0 * g.data()[0] / pv.len().max(1) as f64;
                    let mut dp = Tensor::zeros(pv.shape());
                    for ((d, p), t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                        *d = factor * (p - t);
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let lv = self.value(*logits);
                    let k = lv.shape()[1];
                    let factor = g.data()[0] / labels.len() as f64;
                    let mut dl = Tensor::from_vec(lv.shape(), probs.clone())?;
                    for (r, &label) in labels.iter().enumerate() {
                        dl.data_mut()[r * k + label] -= 1.0;
                    }
                    for x in dl.data_mut() {
                        *x *= factor;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::full(&shape, g.data()[0]));
                }
            }
        }
        let grads = Gradients::new(store, param_grads);
        grads.check_finite()?;
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Value and gradients of a scalar loss built by `f` on a fresh tape.
pub fn gradient<F>(store: &ParamStore, f: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let grads = tape.backward(loss, store)?;
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(shapes: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(n, t)| s.register(*n, t.clone()).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let (store, ids) = store_with(&[
            ("a", Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()),
            ("b", Tensor::zeros(&[2])),
        ]);
        let (v, g) = gradient(&store, |t| {
            let a = t.param(&store, ids[0]);
            Ok(t.sum(a))
        })
        .unwrap();
        assert_eq!(v, -0.5);
        assert_eq!(g.get(ids[0]).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(g.get(ids[1]).is_none());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (store, ids) = store_with(&[("a", Tensor::full(&[4], 2.0))]);
        let (_, g) = gradient(&store, |t| {
            let a = t.param(&store, ids[0]);
            let z = t.scale(a, 0.0);
            Ok(t.sum(z))
        })
        .unwrap();
        assert!(g.get(ids[0]).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn param_binding_is_shared() {
        let (store, ids) = store_with(&[("a", Tensor::full(&[2], 1.5))]);
        let mut tape = Tape::new();
        let a1 = tape.param(&store, ids[0]);
        let a2 = tape.param(&store, ids[0]);
        assert_eq!(a1, a2);
        let s = tape.add(a1, a2).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l, &store).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_k() {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 4]));
        let ce = tape.cross_entropy(l, &[0, 3]).unwrap();
        assert!((tape.scalar(ce) - 4f64.ln()).abs() < 1e-12);
        assert!(tape.backward(ce, &store).is_ok());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let (store, ids) = store_with(&[(
            "x",
            Tensor::from_vec(&[1, 3, 2], vec![1.0, 5.0, 4.0, 2.0, 0.0, 3.0]).unwrap(),
        )]);
        let (v, g) = gradient(&store, |t| {
            let x = t.param(&store, ids[0]);
            let m = t.max_pool(x)?;
            assert_eq!(t.value(m).data(), &[4.0, 5.0]);
            Ok(t.sum(m))
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.get(ids[0]).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
