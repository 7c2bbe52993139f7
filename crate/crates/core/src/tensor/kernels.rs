//! Plain-slice numeric kernels shared by the forward and backward passes.
//!
//! All kernels use a fixed evaluation order, so results are bit-identical
//! for identical inputs.

use super::Real;

/// Dot product with eight independent accumulators.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn transpose<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// `c[m,n] += a[m,k] * b[k,n]`, row-axpy form.
fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c[m,n] += a[m,k] * bt[n,k]^T`, dot form.
fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], bt: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &bt[j * k..(j + 1) * k]);
        }
    }
}

/// Relative cost of a kernel whose vectorized inner loop has length `len`.
fn lane_penalty(len: usize) -> usize {
    match len {
        0..=3 => 6,
        4..=7 => 3,
        8..=31 => 2,
        _ => 1,
    }
}

/// General `c[m,n] += op(a) * op(b)` where `op` optionally transposes.
///
/// With `ta`, `a` is stored `[k,m]`; otherwise `[m,k]`. With `tb`, `b` is
/// stored `[n,k]`; otherwise `[k,n]`. The kernel picks the cheaper of
/// computing `c` or `c^T` with either the axpy or dot inner loop, counting
/// the copies each choice needs.
pub(crate) fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let flops = m * n * k;

    // Candidate plans: (compute transposed output, use dot kernel).
    // Left operand must be row-major [rows, k]; right is [k, cols] for
    // the axpy kernel or [cols, k] for the dot kernel.
    let mut best = (usize::MAX, false, false);
    for &transposed_out in &[false, true] {
        for &use_dot in &[false, true] {
            // Orientation: C = L * R with L:[M,K], R:[K,N] logically.
            let (rows, cols) = if transposed_out { (n, m) } else { (m, n) };
            // Storage flags of L and R in this orientation.
            // For C:   L = op(a), R = op(b)
            // For C^T: L = op(b)^T, R = op(a)^T
            let (l_trans, r_trans) = if transposed_out { (!tb, !ta) } else { (ta, tb) };
            let (l_size, r_size) = if transposed_out { (n * k, m * k) } else { (m * k, k * n) };
            let mut copies = 0;
            if l_trans {
                copies += l_size;
            }
            // r_trans means R is stored [cols, k] (what the dot kernel wants).
            if use_dot != r_trans {
                copies += r_size;
            }
            if transposed_out {
                copies += m * n;
            }
            let inner = if use_dot { k } else { cols };
            let cost = copies * 2 + flops * lane_penalty(inner) + rows;
            if cost < best.0 {
                best = (cost, transposed_out, use_dot);
            }
        }
    }
    let (_, transposed_out, use_dot) = best;

    let (rows, cols) = if transposed_out { (n, m) } else { (m, n) };
    let (l, l_trans, r, r_trans) = if transposed_out {
        (b, !tb, a, !ta)
    } else {
        (a, ta, b, tb)
    };
    // Row-major L:[rows, k]. If l_trans, it is stored [k, rows].
    let l_owned;
    let l_rm: &[T] = if l_trans {
        l_owned = transpose(l, k, rows);
        &l_owned
    } else {
        l
    };
    let r_owned;
    let r_use: &[T] = if use_dot == r_trans {
        r
    } else if r_trans {
        // stored [cols, k], need [k, cols]
        r_owned = transpose(r, cols, k);
        &r_owned
    } else {
        // stored [k, cols], need [cols, k]
        r_owned = transpose(r, k, cols);
        &r_owned
    };

    if !transposed_out {
        if use_dot {
            gemm_nt(rows, cols, k, l_rm, r_use, c);
        } else {
            gemm_nn(rows, cols, k, l_rm, r_use, c);
        }
    } else {
        let mut ct = vec![T::zero(); rows * cols];
        if use_dot {
            gemm_nt(rows, cols, k, l_rm, r_use, &mut ct);
        } else {
            gemm_nn(rows, cols, k, l_rm, r_use, &mut ct);
        }
        // ct is [n, m]; add its transpose into c [m, n].
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] += ct[j * m + i];
            }
        }
    }
}

/// Geometry of a 2-D convolution on one batch item.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// `cols[(c*kh+dy)*kw+dx, oy*out_w+ox] = input[c, oy*s+dy-p, ox*s+dx-p]`
/// with zero padding.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an input gradient.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], grad_input: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut grad_input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (c * g.kh + dy) * g.kw + dx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + dy) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + dx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
