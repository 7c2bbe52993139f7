//! Forward definitions of every differentiable operation.

use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{numel, Binary, Op, Real, Tensor, Unary};
use crate::error::{Error, Result};

/// How the second operand of a binary op maps onto the first.
pub(crate) enum Bcast {
    Same,
    Scalar,
    /// Per-axis strides into `b`, aligned with the axes of `a` (0 on
    /// broadcast axes).
    Strided(Vec<usize>),
}

pub(crate) fn broadcast_plan(a: &[usize], b: &[usize]) -> Option<Bcast> {
    if a == b {
        return Some(Bcast::Same);
    }
    if numel(b) == 1 {
        return Some(Bcast::Scalar);
    }
    let (ra, rb) = (a.len(), b.len());
    let b_core = if rb > ra {
        if b[..rb - ra].iter().any(|&d| d != 1) {
            return None;
        }
        &b[rb - ra..]
    } else {
        b
    };
    let offset = ra - b_core.len();
    let mut natural = vec![0usize; b_core.len()];
    let mut s = 1;
    for i in (0..b_core.len()).rev() {
        natural[i] = s;
        s *= b_core[i];
    }
    let mut strides = vec![0usize; ra];
    for (j, (&bd, &st)) in b_core.iter().zip(&natural).enumerate() {
        let ad = a[offset + j];
        if bd == ad {
            strides[offset + j] = st;
        } else if bd != 1 {
            return None;
        }
    }
    Some(Bcast::Strided(strides))
}

/// Calls `f(i, j)` for every flat index `i` of `a` with the matching flat
/// index `j` of the broadcast operand.
pub(crate) fn for_each_bcast(a_shape: &[usize], plan: &Bcast, mut f: impl FnMut(usize, usize)) {
    let n = numel(a_shape);
    match plan {
        Bcast::Same => (0..n).for_each(|i| f(i, i)),
        Bcast::Scalar => (0..n).for_each(|i| f(i, 0)),
        Bcast::Strided(strides) => {
            let rank = a_shape.len();
            let last = a_shape[rank - 1];
            let s_last = strides[rank - 1];
            let outer = n / last;
            let mut idx = vec![0usize; rank.saturating_sub(1)];
            let mut base = 0usize;
            for o in 0..outer {
                for t in 0..last {
                    f(o * last + t, base + t * s_last);
                }
                for d in (0..rank - 1).rev() {
                    idx[d] += 1;
                    base += strides[d];
                    if idx[d] < a_shape[d] {
                        break;
                    }
                    base -= strides[d] * a_shape[d];
                    idx[d] = 0;
                }
            }
        }
    }
}

/// `f(a[i], b[j])` over the broadcast pairs of `plan`.
#[inline]
fn zip_bcast<T: Real>(a_shape: &[usize], plan: &Bcast, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    match plan {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Strided(_) => {
            let mut out = vec![T::zero(); a.len()];
            for_each_bcast(a_shape, plan, |i, j| out[i] = f(a[i], b[j]));
            out
        }
    }
}

/// The elementwise operation kinds exposed by [`elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Ln,
    Exp,
    Sqrt,
    Sigmoid,
    Scale(f64),
    PowInt(i32),
}

/// Dispatch an elementwise operation by kind. Binary kinds need `b`, which
/// is broadcast into the shape of `a`.
pub fn elementwise<T: Real>(kind: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let need_b = || b.ok_or_else(|| Error::shape("elementwise", "binary op needs a second operand"));
    match kind {
        Elementwise::Add => a.add(need_b()?),
        Elementwise::Sub => a.sub(need_b()?),
        Elementwise::Mul => a.mul(need_b()?),
        Elementwise::Ln => a.ln(),
        Elementwise::Exp => Ok(a.exp()),
        Elementwise::Sqrt => a.sqrt(),
        Elementwise::Sigmoid => Ok(a.sigmoid()),
        Elementwise::Scale(c) => Ok(a.scale(c)),
        Elementwise::PowInt(k) => Ok(a.powi(k)),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
fn horner<T: Real>(coeffs: &[T], x: T) -> T {
    coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * x + c)
}

/// `out[i] = p(x[i])`, one coefficient at a time over fixed-size blocks so
/// the inner loops vectorize.
pub(crate) fn horner_slice<T: Real>(coeffs: &[T], x: &[T], out: &mut [T]) {
    const BLOCK: usize = 256;
    let Some((&top, rest)) = coeffs.split_last() else {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    };
    for (xs, os) in x.chunks(BLOCK).zip(out.chunks_mut(BLOCK)) {
        os.iter_mut().for_each(|o| *o = top);
        for &c in rest.iter().rev() {
            for (o, &v) in os.iter_mut().zip(xs) {
                *o = *o * v + c;
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    fn unary(&self, kind: Unary, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Unary {
                input: self.clone(),
                kind,
            },
        )
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn ln(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::Domain {
                op: "ln",
                detail: format!("input {v} is not strictly positive"),
            });
        }
        Ok(self.unary(Unary::Ln, |v| v.ln()))
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(Unary::Exp, |v| v.exp())
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        if let Some(v) = self.data().iter().find(|v| **v < T::zero()) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("input {v} is negative"),
            });
        }
        Ok(self.unary(Unary::Sqrt, |v| v.sqrt()))
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(Unary::Sigmoid, sigmoid)
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(Unary::Relu, |v| v.max(T::zero()))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        self.unary(Unary::Gelu, gelu)
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let cc = T::of(c);
        self.unary(Unary::Scale(c), |v| v * cc)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let cc = T::of(c);
        self.unary(Unary::AddScalar(c), |v| v + cc)
    }

    pub fn powi(&self, k: i32) -> Tensor<T> {
        self.unary(Unary::PowInt(k), |v| v.powi(k))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (l, h) = (T::of(lo), T::of(hi));
        self.unary(Unary::Clamp { lo, hi }, |v| v.max(l).min(h))
    }

    /// Evaluate `c[0] + c[1] x + ... + c[d] x^d` elementwise with Horner's
    /// rule (additions and multiplications only).
    pub fn polynomial(&self, coeffs: &[f64]) -> Tensor<T> {
        let cs: Vec<T> = coeffs.iter().map(|&c| T::of(c)).collect();
        let mut data = vec![T::zero(); self.numel()];
        horner_slice(&cs, self.data(), &mut data);
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Unary {
                input: self.clone(),
                kind: Unary::Polynomial(coeffs.to_vec()),
            },
        )
    }

    fn binary(&self, other: &Tensor<T>, kind: Binary, op_name: &'static str) -> Result<Tensor<T>> {
        let plan = broadcast_plan(self.shape(), other.shape()).ok_or_else(|| {
            Error::shape(
                op_name,
                format!("cannot broadcast {:?} into {:?}", other.shape(), self.shape()),
            )
        })?;
        let (a, b) = (self.data(), other.data());
        let out = match kind {
            Binary::Add => zip_bcast(self.shape(), &plan, a, b, |x, y| x + y),
            Binary::Sub => zip_bcast(self.shape(), &plan, a, b, |x, y| x - y),
            Binary::Mul => zip_bcast(self.shape(), &plan, a, b, |x, y| x * y),
        };
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Binary {
                a: self.clone(),
                b: other.clone(),
                kind,
            },
        ))
    }

    /// `self + other`, with `other` broadcast into `self`'s shape.
    #[allow(clippy::should_implement_trait)]
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Add, "add")
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Sub, "sub")
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, Binary::Mul, "mul")
    }

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
    /// Either operand may be a plain matrix shared across the other's batch.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let geom = matmul_geom(self.shape(), other.shape())?;
        let mut out = vec![T::zero(); geom.batch * geom.m * geom.n];
        let (a, b) = (self.data(), other.data());
        for bi in 0..geom.batch {
            let ab = if geom.a_batched { bi } else { 0 };
            let bb = if geom.b_batched { bi } else { 0 };
            kernels::gemm(
                false,
                false,
                geom.m,
                geom.n,
                geom.k,
                &a[ab * geom.m * geom.k..(ab + 1) * geom.m * geom.k],
                &b[bb * geom.k * geom.n..(bb + 1) * geom.k * geom.n],
                &mut out[bi * geom.m * geom.n..(bi + 1) * geom.m * geom.n],
            );
        }
        Ok(Tensor::from_op(
            geom.out_shape,
            out,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// 2-D cross-correlation with zero padding.
    ///
    /// `self` is `[B, C, H, W]`, `weight` is `[O, C, kh, kw]` with odd
    /// kernel extents, `bias` is `[O]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let (geom, batch, out_ch) = conv_geom(self.shape(), weight.shape(), stride, pad)?;
        if let Some(b) = bias {
            if b.shape() != [out_ch] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{out_ch}]", b.shape()),
                ));
            }
        }
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let mut cols = vec![T::zero(); batch * rows * ncols];
        let mut out = vec![T::zero(); batch * out_ch * ncols];
        let input = self.data();
        let w = weight.data();
        for b in 0..batch {
            let col = &mut cols[b * rows * ncols..(b + 1) * rows * ncols];
            kernels::im2col(&geom, &input[b * in_plane..(b + 1) * in_plane], col);
            let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
            if let Some(bias) = bias {
                for (o, chunk) in dst.chunks_exact_mut(ncols).enumerate() {
                    chunk.fill(bias.data()[o]);
                }
            }
            kernels::gemm(false, false, out_ch, ncols, rows, w, col, dst);
        }
        Ok(Tensor::from_op(
            vec![batch, out_ch, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                pad,
                cols,
            },
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let (outer, len, inner) = axis_split(self.shape(), axis, "softmax")?;
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        if inner == 1 {
            for (yr, xr) in out.chunks_exact_mut(len).zip(x.chunks_exact(len)) {
                let mx = xr.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut s = T::zero();
                for (y, &v) in yr.iter_mut().zip(xr) {
                    *y = (v - mx).exp();
                    s += *y;
                }
                let inv = T::one() / s;
                yr.iter_mut().for_each(|y| *y *= inv);
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mx = T::neg_infinity();
                    for t in 0..len {
                        mx = mx.max(x[base + t * inner]);
                    }
                    let mut s = T::zero();
                    for t in 0..len {
                        let e = (x[base + t * inner] - mx).exp();
                        out[base + t * inner] = e;
                        s += e;
                    }
                    let inv = T::one() / s;
                    for t in 0..len {
                        out[base + t * inner] *= inv;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                input: self.clone(),
                axis,
            },
        ))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layernorm(&self, gain: &Tensor<T>, offset: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self.shape().last().unwrap();
        if gain.shape() != [d] || offset.shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "gain {:?} / offset {:?} must both be [{d}]",
                    gain.shape(),
                    offset.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let x = self.data();
        let (g, bta) = (gain.data(), offset.data());
        let mut out = vec![T::zero(); x.len()];
        let mut mean = vec![T::zero(); rows];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * rs * g[j] + bta[j];
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                input: self.clone(),
                gain: gain.clone(),
                offset: offset.clone(),
                mean,
                rstd,
            },
        ))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        if self.rank() != 4 {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected [B, C, H, W], got {:?}", self.shape()),
            ));
        }
        let s = self.shape();
        let plane = s[2] * s[3];
        let inv = T::one() / T::of(plane as f64);
        let out = self
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(Tensor::from_op(
            vec![s[0], s[1]],
            out,
            Op::GlobalAvgPool { input: self.clone() },
        ))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(vec![1], vec![s], Op::Sum { input: self.clone() })
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// `out[i] = self[index[i]]`, reshaped to `shape`.
    pub fn gather(&self, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Tensor<T>> {
        if numel(&shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {:?}", index.len(), shape),
            ));
        }
        let x = self.data();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", x.len()),
            ));
        }
        let out = index.iter().map(|&i| x[i]).collect();
        Ok(Tensor::from_op(
            shape,
            out,
            Op::Gather {
                input: self.clone(),
                index,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            Op::Reshape { input: self.clone() },
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {rank} axes"),
            ));
        }
        let shape = self.shape();
        let mut in_strides = vec![1usize; rank];
        for i in (0..rank.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let index = strided_index(&out_shape, &strides, 0);
        self.gather(index.into(), out_shape)
    }

    /// Swap two axes.
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a0 >= perm.len() || a1 >= perm.len() {
            return Err(Error::shape("transpose", format!("axes {a0},{a1} out of range")));
        }
        perm.swap(a0, a1);
        self.permute(&perm)
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let (outer, full, inner) = axis_split(self.shape(), axis, "narrow")?;
        if len == 0 || start + len > full {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} out of 0..{full}", start + len),
            ));
        }
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            index.extend(base..base + len * inner);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        self.gather(index.into(), shape)
    }
}

/// Flat indices for traversing `shape` with the given per-axis strides.
pub(crate) fn strided_index(shape: &[usize], strides: &[usize], offset: usize) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = offset;
    for _ in 0..n {
        out.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            pos -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub(crate) struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_geom(a: &[usize], b: &[usize]) -> Result<MatmulGeom> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(
            "matmul",
            format!("operands must be at least 2-D, got {a:?} and {b:?}"),
        ));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dimensions differ: {a:?} x {b:?}"),
        ));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let (batch_shape, a_batched, b_batched) = if a_batch == b_batch {
        (a_batch.to_vec(), !a_batch.is_empty(), !b_batch.is_empty())
    } else if b_batch.is_empty() {
        (a_batch.to_vec(), true, false)
    } else if a_batch.is_empty() {
        (b_batch.to_vec(), false, true)
    } else {
        return Err(Error::shape(
            "matmul",
            format!("batch dimensions differ: {a:?} x {b:?}"),
        ));
    };
    let batch = batch_shape.iter().product::<usize>().max(1);
    let mut out_shape = batch_shape;
    out_shape.extend([m, n]);
    Ok(MatmulGeom {
        batch,
        m,
        k,
        n,
        a_batched,
        b_batched,
        out_shape,
    })
}

pub(crate) fn conv_geom(
    input: &[usize],
    weight: &[usize],
    stride: usize,
    pad: usize,
) -> Result<(ConvGeom, usize, usize)> {
    if input.len() != 4 || weight.len() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!("expected [B,C,H,W] input and [O,C,kh,kw] weight, got {input:?} and {weight:?}"),
        ));
    }
    let (batch, channels, height, width) = (input[0], input[1], input[2], input[3]);
    let (out_ch, w_ch, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
    if w_ch != channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {channels} channels, weight expects {w_ch}"),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel extents must be odd, got {kh}x{kw}"),
        ));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d", "stride must be at least 1"));
    }
    if height + 2 * pad < kh || width + 2 * pad < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {height}x{width}"),
        ));
    }
    let out_h = (height + 2 * pad - kh) / stride + 1;
    let out_w = (width + 2 * pad - kw) / stride + 1;
    Ok((
        ConvGeom {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
        },
        batch,
        out_ch,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn scalar_identities() {
        assert_eq!(t(&[1], &[0.0]).sigmoid().item(), 0.5);
        assert_eq!(t(&[1], &[1.0]).ln().unwrap().item(), 0.0);
        let p = t(&[2], &[2.0, 3.0]).mul(&t(&[2], &[4.0, 5.0])).unwrap();
        assert_eq!(p.data(), &[8.0, 15.0]);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let err = t(&[2], &[1.0, 0.0]).ln().unwrap_err();
        assert!(matches!(err, Error::Domain { op: "ln", .. }));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let err = t(&[2], &[1.0, 2.0]).add(&t(&[3], &[1.0, 2.0, 3.0])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn broadcasting_patterns() {
        // scalar
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mul(&t(&[1], &[2.0])).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        // trailing vector (bias)
        assert_eq!(a.add(&t(&[2], &[10.0, 20.0])).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        // trailing singleton axis (spatial map over channels)
        assert_eq!(a.mul(&t(&[2, 1], &[1.0, -1.0])).unwrap().data(), &[1.0, 2.0, -3.0, -4.0]);
        // leading broadcast of a 2-D block
        let a3 = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a3.add(&t(&[1, 2], &[1.0, 1.0])).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_examples() {
        let x = t(&[2, 2], &[0.3, -1.0, 2.5, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let ones = t(&[2, 1], &[1.0, 1.0]);
        let c = a.matmul(&ones).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert!(a.matmul(&t(&[3, 1], &[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn batched_matmul_shares_plain_matrix() {
        let a = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 10.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1, 1]);
        assert_eq!(c.data(), &[21.0, 43.0]);
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let x = Tensor::<f64>::create(&[1, 1, 3, 3], Init::Uniform { lo: 0.0, hi: 1.0, seed: 2 }).unwrap();
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let y = x.conv2d(&w, Some(&b), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());

        let ones = Tensor::<f64>::create(&[1, 1, 3, 3], Init::One).unwrap();
        let k = Tensor::<f64>::create(&[1, 1, 3, 3], Init::One).unwrap();
        let y = ones.conv2d(&k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_checks_channels() {
        let x = Tensor::<f64>::create(&[1, 2, 4, 4], Init::One).unwrap();
        let w = Tensor::<f64>::create(&[1, 3, 3, 3], Init::One).unwrap();
        assert!(matches!(x.conv2d(&w, None, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Tensor::<f64>::create(&[2, 1, 5, 5], Init::One).unwrap();
        let w = Tensor::<f64>::create(&[3, 1, 3, 3], Init::One).unwrap();
        let y = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3, 3]);
    }

    #[test]
    fn softmax_values() {
        let s = t(&[2], &[0.0, 0.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[3], &[1.0, 2.0, 3.0]).softmax(0).unwrap();
        // exp(k)/sum computed by hand: e^1, e^2, e^3 over their sum
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-4);
        }
        for (got, want) in s.data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
        let shifted = t(&[3], &[101.0, 102.0, 103.0]).softmax(0).unwrap();
        for (a, b) in s.data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = t(&[2, 3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let tot: f64 = (0..3).map(|k| s.data()[o * 6 + k * 2 + i]).sum();
                assert!((tot - 1.0).abs() < 1e-12);
            }
        }
        assert!(x.softmax(3).is_err());
    }

    #[test]
    fn layernorm_edge_cases() {
        let x = t(&[4], &[3.0; 4]);
        let g = t(&[4], &[1.0; 4]);
        let b = t(&[4], &[0.0; 4]);
        let y = x.layernorm(&g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-3));

        let x = t(&[4], &[1.0, -2.0, 0.5, 7.0]);
        let g0 = t(&[4], &[0.0; 4]);
        let off = t(&[4], &[0.1, 0.2, 0.3, 0.4]);
        let y = x.layernorm(&g0, &off, 1e-5).unwrap();
        assert_eq!(y.data(), off.data());

        let y = x.layernorm(&g, &b, 1e-5).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pooling_means() {
        let x = Tensor::<f64>::create(&[1, 2, 3, 3], Init::Constant(0.7)).unwrap();
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.shape(), &[1, 2]);
        assert!(p.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
        let y = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).global_avg_pool().unwrap();
        assert_eq!(y.data(), &[2.5]);
    }

    #[test]
    fn permute_narrow_reshape() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let z = x.narrow(1, 1, 2).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0, 4.0, 5.0]);
        assert!(x.narrow(1, 2, 2).is_err());
        assert!(x.permute(&[0, 0]).is_err());
        assert_eq!(x.reshape(&[6]).unwrap().shape(), &[6]);
        assert!(x.reshape(&[4]).is_err());
    }

    #[test]
    fn polynomial_is_horner() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        let y = x.polynomial(&[1.0, 1.0, 0.5]);
        assert_eq!(y.data(), &[0.5, 1.0, 5.0]);
        let coeffs = [0.3, -1.0, 0.25, 2.0];
        let xs: Vec<f64> = (0..600).map(|i| i as f64 / 100.0 - 3.0).collect();
        let mut out = vec![0.0; xs.len()];
        horner_slice(&coeffs, &xs, &mut out);
        for (x, o) in xs.iter().zip(&out) {
            assert_eq!(*o, horner(&coeffs, *x));
        }
    }

    #[test]
    fn elementwise_dispatch() {
        let a = t(&[2], &[1.0, 4.0]);
        let b = t(&[2], &[2.0, 2.0]);
        assert_eq!(elementwise(Elementwise::Sub, &a, Some(&b)).unwrap().data(), &[-1.0, 2.0]);
        assert_eq!(elementwise(Elementwise::Sqrt, &a, None).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(elementwise(Elementwise::PowInt(3), &b, None).unwrap().data(), &[8.0, 8.0]);
        assert!(elementwise(Elementwise::Add, &a, None).is_err());
    }
}
