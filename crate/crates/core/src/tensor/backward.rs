use std::collections::{HashMap, HashSet};

use super::kernels::{self, ConvGeom};
use super::ops::{broadcast_plan, Bcast, conv_geom, for_each_bcast, gelu_grad, horner_slice, matmul_geom};
use super::{numel, Binary, Op, Real, Tensor, Unary};
use crate::error::{Error, Result};

/// Gradient buffers for non-leaf nodes during one backward sweep.
struct GradSink<T: Real> {
    grads: HashMap<u64, Vec<T>>,
}

impl<T: Real> GradSink<T> {
    /// Zero-initialized accumulation buffer for `t`, or `None` if `t` does
    /// not need a gradient.
    fn buf(&mut self, t: &Tensor<T>) -> Option<&mut Vec<T>> {
        if !t.requires_grad() {
            return None;
        }
        let n = t.numel();
        Some(self.grads.entry(t.id()).or_insert_with(|| vec![T::zero(); n]))
    }
}

fn topo_order<T: Real>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack = vec![(root.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for input in t.op().inputs() {
            if input.requires_grad() && !visited.contains(&input.id()) {
                stack.push((input.clone(), false));
            }
        }
    }
    order
}

impl<T: Real> Tensor<T> {
    /// Reverse-mode sweep from this one-element tensor.
    ///
    /// Adds `d self / d leaf` into the gradient buffer of every reachable
    /// leaf that requires a gradient. Calling it again (on this or another
    /// graph over the same leaves) accumulates; clear buffers with
    /// [`Tensor::zero_grad`] or [`super::ParamStore::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must have exactly one element, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = topo_order(self);
        let mut sink = GradSink {
            grads: HashMap::new(),
        };
        sink.grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = sink.grads.remove(&t.id()) else {
                continue;
            };
            if let Op::Leaf = t.op() {
                t.accumulate_grad_owned(g);
                continue;
            }
            backprop(t, &g, &mut sink);
        }
        Ok(())
    }
}

/// `dx[i] += f(g[i], v[i])`.
#[inline]
fn acc<T: Real>(dx: &mut [T], g: &[T], v: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &gi), &vi) in dx.iter_mut().zip(g).zip(v) {
        *d += f(gi, vi);
    }
}

fn backprop<T: Real>(out: &Tensor<T>, g: &[T], sink: &mut GradSink<T>) {
    match out.op() {
        Op::Leaf => {}
        Op::Unary { input, kind } => {
            let x = input.data();
            let y = out.data();
            let Some(dx) = sink.buf(input) else { return };
            match kind {
                Unary::Ln => acc(dx, g, x, |gi, xi| gi / xi),
                Unary::Exp => acc(dx, g, y, |gi, yi| gi * yi),
                Unary::Sqrt => {
                    let half = T::of(0.5);
                    acc(dx, g, y, |gi, yi| gi * half / yi)
                }
                Unary::Sigmoid => acc(dx, g, y, |gi, yi| gi * yi * (T::one() - yi)),
                Unary::Relu => acc(dx, g, x, |gi, xi| if xi > T::zero() { gi } else { T::zero() }),
                Unary::Gelu => acc(dx, g, x, |gi, xi| gi * gelu_grad(xi)),
                Unary::Scale(c) => {
                    let c = T::of(*c);
                    acc(dx, g, x, |gi, _| gi * c)
                }
                Unary::AddScalar(_) => acc(dx, g, x, |gi, _| gi),
                Unary::PowInt(k) => {
                    let kk = T::of(*k as f64);
                    acc(dx, g, x, |gi, xi| gi * kk * xi.powi(k - 1))
                }
                Unary::Clamp { lo, hi } => {
                    let (l, h) = (T::of(*lo), T::of(*hi));
                    acc(dx, g, x, |gi, xi| if xi >= l && xi <= h { gi } else { T::zero() })
                }
                Unary::Polynomial(coeffs) => {
                    let deriv: Vec<T> = coeffs
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(p, &c)| T::of(c * p as f64))
                        .collect();
                    let mut d = [T::zero(); 256];
                    for ((xs, gs), dxs) in x.chunks(256).zip(g.chunks(256)).zip(dx.chunks_mut(256)) {
                        let d = &mut d[..xs.len()];
                        horner_slice(&deriv, xs, d);
                        for ((o, &gi), &di) in dxs.iter_mut().zip(gs).zip(d.iter()) {
                            *o += gi * di;
                        }
                    }
                }
            }
        }
        Op::Binary { a, b, kind } => {
            let plan = broadcast_plan(a.shape(), b.shape()).expect("validated in forward");
            let (av, bv) = (a.data(), b.data());
            let same = matches!(plan, Bcast::Same);
            if let Some(da) = sink.buf(a) {
                match kind {
                    Binary::Add | Binary::Sub => da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi),
                    Binary::Mul if same => acc(da, g, bv, |gi, bi| gi * bi),
                    Binary::Mul => for_each_bcast(a.shape(), &plan, |i, j| da[i] += g[i] * bv[j]),
                }
            }
            if let Some(db) = sink.buf(b) {
                match kind {
                    Binary::Add if same => acc(db, g, g, |gi, _| gi),
                    Binary::Sub if same => acc(db, g, g, |gi, _| -gi),
                    Binary::Mul if same => acc(db, g, av, |gi, ai| gi * ai),
                    Binary::Add => for_each_bcast(a.shape(), &plan, |i, j| db[j] += g[i]),
                    Binary::Sub => for_each_bcast(a.shape(), &plan, |i, j| db[j] -= g[i]),
                    Binary::Mul => for_each_bcast(a.shape(), &plan, |i, j| db[j] += g[i] * av[i]),
                }
            }
        }
        Op::MatMul { a, b } => {
            let geom = matmul_geom(a.shape(), b.shape()).expect("validated in forward");
            let (m, k, n) = (geom.m, geom.k, geom.n);
            let (av, bv) = (a.data(), b.data());
            if let Some(da) = sink.buf(a) {
                for bi in 0..geom.batch {
                    let ab = if geom.a_batched { bi } else { 0 };
                    let bb = if geom.b_batched { bi } else { 0 };
                    kernels::gemm(
                        false,
                        true,
                        m,
                        k,
                        n,
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[bb * k * n..(bb + 1) * k * n],
                        &mut da[ab * m * k..(ab + 1) * m * k],
                    );
                }
            }
            if let Some(db) = sink.buf(b) {
                for bi in 0..geom.batch {
                    let ab = if geom.a_batched { bi } else { 0 };
                    let bb = if geom.b_batched { bi } else { 0 };
                    kernels::gemm(
                        true,
                        false,
                        k,
                        n,
                        m,
                        &av[ab * m * k..(ab + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut db[bb * k * n..(bb + 1) * k * n],
                    );
                }
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
            cols,
        } => {
            let (geom, batch, out_ch): (ConvGeom, usize, usize) =
                conv_geom(input.shape(), weight.shape(), *stride, *pad).expect("validated in forward");
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            let in_plane = geom.channels * geom.height * geom.width;
            if let Some(bias) = bias {
                if let Some(db) = sink.buf(bias) {
                    for b in 0..batch {
                        for (o, chunk) in g[b * out_ch * ncols..(b + 1) * out_ch * ncols]
                            .chunks_exact(ncols)
                            .enumerate()
                        {
                            db[o] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            if let Some(dw) = sink.buf(weight) {
                for b in 0..batch {
                    kernels::gemm(
                        false,
                        true,
                        out_ch,
                        rows,
                        ncols,
                        &g[b * out_ch * ncols..(b + 1) * out_ch * ncols],
                        &cols[b * rows * ncols..(b + 1) * rows * ncols],
                        dw,
                    );
                }
            }
            let w = weight.data();
            if let Some(dx) = sink.buf(input) {
                let mut dcols = vec![T::zero(); rows * ncols];
                for b in 0..batch {
                    dcols.fill(T::zero());
                    kernels::gemm(
                        true,
                        false,
                        rows,
                        ncols,
                        out_ch,
                        w,
                        &g[b * out_ch * ncols..(b + 1) * out_ch * ncols],
                        &mut dcols,
                    );
                    kernels::col2im(&geom, &dcols, &mut dx[b * in_plane..(b + 1) * in_plane]);
                }
            }
        }
        Op::Softmax { input, axis } => {
            let shape = input.shape();
            let outer: usize = shape[..*axis].iter().product();
            let len = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let y = out.data();
            let Some(dx) = sink.buf(input) else { return };
            if inner == 1 {
                for ((d, gr), yr) in dx.chunks_exact_mut(len).zip(g.chunks_exact(len)).zip(y.chunks_exact(len)) {
                    let s = gr.iter().zip(yr).fold(T::zero(), |s, (&gi, &yi)| s + gi * yi);
                    acc(d, gr, yr, |gi, yi| yi * (gi - s));
                }
            } else {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut s = T::zero();
                        for t in 0..len {
                            s += g[base + t * inner] * y[base + t * inner];
                        }
                        for t in 0..len {
                            let p = base + t * inner;
                            dx[p] += y[p] * (g[p] - s);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            gain,
            offset,
            mean,
            rstd,
        } => {
            let d = *input.shape().last().unwrap();
            let rows = input.numel() / d;
            let x = input.data();
            let gv = gain.data();
            let xhat = |r: usize, j: usize| (x[r * d + j] - mean[r]) * rstd[r];
            if let Some(dg) = sink.buf(gain) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += g[r * d + j] * xhat(r, j);
                    }
                }
            }
            if let Some(db) = sink.buf(offset) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += g[r * d + j];
                    }
                }
            }
            if let Some(dx) = sink.buf(input) {
                let inv_d = T::one() / T::of(d as f64);
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..d {
                        let gh = g[r * d + j] * gv[j];
                        m1 += gh;
                        m2 += gh * xhat(r, j);
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let gh = g[r * d + j] * gv[j];
                        dx[r * d + j] += rstd[r] * (gh - m1 - xhat(r, j) * m2);
                    }
                }
            }
        }
        Op::GlobalAvgPool { input } => {
            let s = input.shape();
            let plane = s[2] * s[3];
            let inv = T::one() / T::of(plane as f64);
            let Some(dx) = sink.buf(input) else { return };
            for (bc, chunk) in dx.chunks_exact_mut(plane).enumerate() {
                let v = g[bc] * inv;
                chunk.iter_mut().for_each(|d| *d += v);
            }
        }
        Op::Sum { input } => {
            let Some(dx) = sink.buf(input) else { return };
            dx.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::Gather { input, index } => {
            let Some(dx) = sink.buf(input) else { return };
            for (i, &src) in index.iter().enumerate() {
                dx[src] += g[i];
            }
        }
        Op::Reshape { input } => {
            let Some(dx) = sink.buf(input) else { return };
            debug_assert_eq!(dx.len(), numel(out.shape()));
            dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap().requiring_grad()
    }

    #[test]
    fn square_and_log_gradients() {
        let x = leaf(&[1], &[3.0]);
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![6.0]);

        let x = leaf(&[1], &[2.0]);
        x.ln().unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![0.5]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = leaf(&[1], &[1.5]);
        x.add(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let x = leaf(&[2], &[1.0, 2.0]);
        let loss = x.scale(3.0).sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![6.0, 6.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = leaf(&[2], &[1.0, 2.0]);
        assert!(matches!(x.scale(2.0).backward(), Err(Error::Shape { .. })));
    }

    #[test]
    fn pool_gradient_is_uniform() {
        let x = leaf(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        x.global_avg_pool().unwrap().sum().backward().unwrap();
        for v in x.grad_vec().unwrap() {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn broadcast_operand_gradient_is_reduced() {
        let a = leaf(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&[3], &[1.0, 1.0, 1.0]);
        a.mul(&b).unwrap().sum().backward().unwrap();
        assert_eq!(b.grad_vec().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(a.grad_vec().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let c = Tensor::<f64>::from_f64(&[1], &[2.0]).unwrap();
        let x = leaf(&[1], &[3.0]);
        x.mul(&c).unwrap().sum().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad_vec().unwrap(), vec![2.0]);
    }
}
