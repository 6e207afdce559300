//! Dense row-major tensors and the forward kernels the tape is built from.
//!
//! Every kernel here is a plain function of its inputs. Gradients are handled
//! by [`crate::graph`], which calls back into these kernels.

use alloc::vec;
use alloc::vec::Vec;

use crate::element::{DType, Element};
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    grad: Option<Vec<E>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(alloc::format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return shape_err("tensor", shape, &[data.len()]);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        E::DTYPE
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<E>) -> Result<()> {
        if grad.len() != self.data.len() {
            return shape_err("set_grad", &self.shape, &[grad.len()]);
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<E>> {
        self.grad.take()
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<E> {
        if self.data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::of(v.as_f64())).collect(),
            grad: None,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<E>) -> Result<E> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", &self.shape, &other.shape);
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(E::zero(), |m, (a, b)| m.max((*a - *b).abs())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.iter().any(|&d| d == 0) {
            return shape_err("reshape", &self.shape, shape);
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    /// Materialized axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", &self.shape, perm);
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.data.len());
        let mut index = vec![0usize; rank];
        let mut offset = 0usize;
        for _ in 0..self.data.len() {
            data.push(self.data[offset]);
            for axis in (0..rank).rev() {
                index[axis] += 1;
                offset += src_strides[axis];
                if index[axis] < out_shape[axis] {
                    break;
                }
                offset -= src_strides[axis] * out_shape[axis];
                index[axis] = 0;
            }
        }
        Ok(Tensor {
            shape: out_shape,
            data,
            grad: None,
        })
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err("add", &self.shape, &other.shape);
        }
        Ok(self.zip_map(other, |a, b| a + b))
    }

    /// Adds `other` whose shape equals the trailing extents of `self`.
    pub fn add_broadcast(&self, other: &Tensor<E>) -> Result<Self> {
        let tail = other.rank();
        if tail > self.rank() || self.shape[self.rank() - tail..] != other.shape[..] {
            return shape_err("add_broadcast", &self.shape, &other.shape);
        }
        let n = other.len();
        let mut out = self.clone_values();
        for chunk in out.data.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(&other.data) {
                *o += *b;
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: E) -> Self {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    fn zip_map(&self, other: &Tensor<E>, f: impl Fn(E, E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            grad: None,
        }
    }

    fn clone_values(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    /// `[m, k] x [k, n]`; a leading operand of higher rank is treated as `[rows, k]`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Self> {
        if self.rank() < 2 || other.rank() != 2 || self.shape[self.rank() - 1] != other.shape[0] {
            return shape_err("matmul", &self.shape, &other.shape);
        }
        let k = other.shape[0];
        let n = other.shape[1];
        let m = self.len() / k;
        let mut out_shape = self.shape.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![E::zero(); m * n];
        gemm(&self.data, &other.data, &mut data, m, k, n);
        Tensor::new(&out_shape, data)
    }

    /// Batched product of `[b, m, k]` with `[b, k, n]`, or with `[b, n, k]` when
    /// `trans_b` is set.
    pub fn bmm(&self, other: &Tensor<E>, trans_b: bool) -> Result<Self> {
        if self.rank() != 3 || other.rank() != 3 || self.shape[0] != other.shape[0] {
            return shape_err("bmm", &self.shape, &other.shape);
        }
        let (batch, m, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (kb, n) = if trans_b {
            (other.shape[2], other.shape[1])
        } else {
            (other.shape[1], other.shape[2])
        };
        if kb != k {
            return shape_err("bmm", &self.shape, &other.shape);
        }
        let mut data = vec![E::zero(); batch * m * n];
        for b in 0..batch {
            let a = &self.data[b * m * k..(b + 1) * m * k];
            let rhs = &other.data[b * k * n..(b + 1) * k * n];
            let out = &mut data[b * m * n..(b + 1) * m * n];
            if trans_b {
                for i in 0..m {
                    let row = &a[i * k..(i + 1) * k];
                    for j in 0..n {
                        let col = &rhs[j * k..(j + 1) * k];
                        out[i * n + j] = dot(row, col);
                    }
                }
            } else {
                gemm_serial(a, rhs, out, m, k, n);
            }
        }
        Tensor::new(&[batch, m, n], data)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&self) -> Result<Self> {
        let n = *self.shape.last().unwrap();
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "NaN in input".into(),
            });
        }
        let mut out = self.clone_values();
        for row in out.data.chunks_mut(n) {
            let max = row.iter().fold(E::neg_infinity(), |m, &v| m.max(v));
            let mut total = E::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(out)
    }

    /// Layer normalization over the last axis. Also returns the normalized
    /// values and the per-slice reciprocal standard deviation for backward.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: E,
    ) -> Result<(Self, Vec<E>, Vec<E>)> {
        let d = *self.shape.last().unwrap();
        if d < 2 || gamma.shape != [d] || beta.shape != [d] {
            return shape_err("layer_norm", &self.shape, &gamma.shape);
        }
        let rows = self.len() / d;
        let inv_d = E::one() / E::of(d as f64);
        let mut xhat = vec![E::zero(); self.len()];
        let mut rstd = vec![E::zero(); rows];
        let mut out = vec![E::zero(); self.len()];
        for r in 0..rows {
            let x = &self.data[r * d..(r + 1) * d];
            let mean = x.iter().copied().sum::<E>() * inv_d;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * inv_d;
            let rs = E::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (x[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = gamma.data[i] * h + beta.data[i];
            }
        }
        Ok((Tensor::new(&self.shape, out)?, xhat, rstd))
    }

    /// Exact (erf) GELU.
    pub fn gelu(&self) -> Self {
        self.map(gelu_scalar)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return shape_err("narrow", &self.shape, &[axis, start, len]);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, data)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        if axis >= first.rank() {
            return shape_err("concat", &first.shape, &[axis]);
        }
        for p in parts {
            if p.rank() != first.rank()
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return shape_err("concat", &first.shape, &p.shape);
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(&shape, data)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() || self.rank() < 2 {
            return shape_err("mean_axis", &self.shape, &[axis]);
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let inv = E::one() / E::of(extent as f64);
        let mut data = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += *s;
                }
            }
        }
        for v in data.iter_mut() {
            *v *= inv;
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Tensor::new(&shape, data)
    }

    /// Stack `n` copies along a new leading axis.
    pub fn repeat_leading(&self, n: usize) -> Self {
        let mut shape = Vec::with_capacity(self.rank() + 1);
        shape.push(n);
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(n * self.len());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }
}

pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let half = E::of(0.5);
    half * x * (E::one() + (x * E::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad_scalar<E: Element>(x: E) -> E {
    let cdf = E::of(0.5) * (E::one() + (x * E::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * E::of(0.5)).exp() * E::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[inline]
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = E::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

fn gemm_serial<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[k, n]`. Rows are independent, so the parallel
/// path produces the same bits as the serial one.
pub(crate) fn gemm<E: Element>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    {
        const PAR_WORK: usize = 1 << 16;
        if m * k * n >= PAR_WORK && m >= 8 {
            use rayon::prelude::*;
            let rows_per_task = (PAR_WORK / (k * n).max(1)).clamp(1, m);
            out.par_chunks_mut(rows_per_task * n)
                .enumerate()
                .for_each(|(t, chunk)| {
                    let r0 = t * rows_per_task;
                    let rows = chunk.len() / n;
                    gemm_serial(&a[r0 * k..(r0 + rows) * k], b, chunk, rows, k, n);
                });
            return;
        }
    }
    gemm_serial(a, b, out, m, k, n);
}

/// `out[k, n] += a[m, k]^T * g[m, n]`.
pub(crate) fn gemm_tn<E: Element>(a: &[E], g: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m, k] += g[m, n] * b[k, n]^T`.
pub(crate) fn gemm_nt<E: Element>(g: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * k);
    let body = |i: usize, orow: &mut [E]| {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            orow[p] += dot(grow, &b[p * n..(p + 1) * n]);
        }
    };
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= 1 << 16 && m >= 8 {
            use rayon::prelude::*;
            out.par_chunks_mut(k).enumerate().for_each(|(i, orow)| body(i, orow));
            return;
        }
    }
    for (i, orow) in out.chunks_mut(k).enumerate() {
        body(i, orow);
    }
}
