//! Reverse-mode tape.
//!
//! A [`Graph`] records every primitive in the order it was evaluated, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it
//! once in reverse and deposits adjoints on the leaves that asked for them.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, gelu_grad_scalar, inverse_perm, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<E: Element> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, E),
    MulConst(Var, Vec<E>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    MeanAxis(Var, usize),
    RepeatLeading(Var),
    Sum(Var),
    WeightedSum(Var, Vec<E>),
    CrossEntropy {
        logits: Var,
        probs: Vec<E>,
        targets: Vec<usize>,
        smoothing: E,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires_grad: bool,
}

pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Only leaves with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Adjoint deposited on a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<E>> {
        self.nodes[v.0].value.take_grad()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = self.value(a).bmm(self.value(b), trans_b)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + b` where `b` matches the trailing extents of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add_broadcast(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: E) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<E>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return shape_err("mul_const", self.shape(a), c.shape());
        }
        let factors = c.data().to_vec();
        let x = self.value(a);
        let data: Vec<E> = x.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let out = Tensor::new(x.shape(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MulConst(a, factors), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).gelu();
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax()?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: E) -> Result<Var> {
        let (out, xhat, rstd) = self.value(x).layer_norm(self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow(axis, start, len)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Narrow { a, axis, start }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).mean_axis(axis)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::MeanAxis(a, axis), rg))
    }

    /// Stacks `n` copies of `a` along a new leading axis.
    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Var {
        let out = self.value(a).repeat_leading(n);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::RepeatLeading(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    /// `sum(a * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor<E>) -> Result<Var> {
        if self.shape(a) != weights.shape() {
            return shape_err("weighted_sum", self.shape(a), weights.shape());
        }
        let w = weights.data().to_vec();
        let total = self.value(a).data().iter().zip(&w).map(|(&x, &y)| x * y).sum();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(a, w), rg))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits, with optional
    /// label smoothing spreading `smoothing` mass uniformly over all classes.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: E) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != targets.len() {
            return shape_err("cross_entropy", x.shape(), &[targets.len()]);
        }
        let classes = x.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(alloc::format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let probs = x.softmax()?;
        let off = smoothing / E::of(classes as f64);
        let on = E::one() - smoothing + off;
        let mut loss = E::zero();
        for (row, &t) in probs.data().chunks(classes).zip(targets) {
            for (c, &p) in row.iter().enumerate() {
                let q = if c == t { on } else { off };
                if q != E::zero() {
                    loss -= q * p.max(E::min_positive_value()).ln();
                }
            }
        }
        loss /= E::of(targets.len() as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs: probs.into_data(),
                targets: targets.to_vec(),
                smoothing,
            },
            rg,
        ))
    }

    /// Replays adjoints from a scalar `loss`. Leaves that require a gradient
    /// get it in their grad slot; all other tensors keep theirs empty.
    /// Returns the number of recorded ops that were replayed.
    pub fn backward(&mut self, loss: Var) -> Result<usize> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![E::one()]);
        let mut replayed = 0;
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.set_grad(g)?;
                continue;
            }
            replayed += 1;
            self.propagate(id, &g, &mut grads)?;
        }
        Ok(replayed)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<E>>], v: Var, contribution: Vec<E>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contribution) {
                    *a += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                if self.wants(*a) {
                    let mut da = vec![E::zero(); m * k];
                    tensor::gemm_nt(g, bv.data(), &mut da, m, k, n);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![E::zero(); k * n];
                    tensor::gemm_tn(av.data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![E::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv.data()[i * k * n..(i + 1) * k * n];
                        let out = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // b is [n, k]: da = g b
                            gemm_into(gi, bi, out, m, n, k);
                        } else {
                            tensor::gemm_nt(gi, bi, out, m, k, n);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![E::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db[n, k] = g^T a
                            tensor::gemm_tn(gi, ai, out, m, n, k);
                        } else {
                            tensor::gemm_tn(ai, gi, out, m, k, n);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![E::zero(); n];
                    for chunk in g.chunks(n) {
                        for (d, &c) in db.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::MulConst(a, factors) => {
                self.accumulate(grads, *a, g.iter().zip(factors).map(|(&v, &f)| v * f).collect());
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_grad_scalar(xv)).collect(),
                );
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                let mut dx = vec![E::zero(); y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let inner: E = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                    for i in 0..n {
                        dr[i] = yr[i] * (gr[i] - inner);
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                if self.wants(*x) {
                    let inv_d = E::one() / E::of(d as f64);
                    let mut dx = vec![E::zero(); g.len()];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = E::zero();
                        let mut mean_gh = E::zero();
                        for i in 0..d {
                            let gi = gr[i] * gam[i];
                            mean_g += gi;
                            mean_gh += gi * hr[i];
                        }
                        mean_g *= inv_d;
                        mean_gh *= inv_d;
                        for i in 0..d {
                            dx[r * d + i] = *rs * (gr[i] * gam[i] - mean_g - hr[i] * mean_gh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![E::zero(); d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * hr[i];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![E::zero(); d];
                    for gr in g.chunks(d) {
                        for i in 0..d {
                            db[i] += gr[i];
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let gt = Tensor::new(node.value.shape(), g.to_vec())?;
                let back = gt.permute(&inverse_perm(perm))?;
                self.accumulate(grads, *a, back.into_data());
            }
            Op::Narrow { a, axis, start } => {
                let src = self.value(*a).shape();
                let len = node.value.shape()[*axis];
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[*axis + 1..].iter().product();
                let extent = src[*axis];
                let mut da = vec![E::zero(); self.value(*a).len()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let s = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&g[s..s + len * inner]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let ext = self.value(*p).shape()[*axis];
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            dp.extend_from_slice(&g[s..s + ext * inner]);
                        }
                        self.accumulate(grads, *p, dp);
                    }
                    offset += ext;
                }
            }
            Op::MeanAxis(a, axis) => {
                let src = self.value(*a).shape();
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[*axis + 1..].iter().product();
                let extent = src[*axis];
                let inv = E::one() / E::of(extent as f64);
                let mut da = vec![E::zero(); outer * extent * inner];
                for o in 0..outer {
                    let gs = &g[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        let base = (o * extent + e) * inner;
                        for (d, &gv) in da[base..base + inner].iter_mut().zip(gs) {
                            *d = gv * inv;
                        }
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::RepeatLeading(a) => {
                let n = self.value(*a).len();
                let mut da = vec![E::zero(); n];
                for chunk in g.chunks(n) {
                    for (d, &c) in da.iter_mut().zip(chunk) {
                        *d += c;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::WeightedSum(a, w) => {
                self.accumulate(grads, *a, w.iter().map(|&wv| wv * g[0]).collect());
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                smoothing,
            } => {
                let classes = self.value(*logits).shape()[1];
                let off = *smoothing / E::of(classes as f64);
                let on = E::one() - *smoothing + off;
                let scale = g[0] / E::of(targets.len() as f64);
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(classes).zip(targets) {
                    for (c, v) in row.iter_mut().enumerate() {
                        let q = if c == t { on } else { off };
                        *v = (*v - q) * scale;
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`, serial.
fn gemm_into<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    tensor::gemm(a, b, out, m, k, n);
}
