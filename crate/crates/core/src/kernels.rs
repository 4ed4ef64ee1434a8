//! Raw numeric kernels over flat slices. Shapes are validated by callers.
//!
//! Convolutions never materialize an im2col buffer: each kernel tap is one
//! GEMM whose input operand is a strided view of the signal.

use rayon::prelude::*;

use crate::tensor::Element;

/// A matrix view into a flat slice: element `(i, j)` lives at
/// `offset + i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn new(offset: usize, rs: usize, cs: usize) -> Self {
        View { offset, rs, cs }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C += A B` with `A: m x k`, `B: k x n`, `C: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    av: View,
    b: &[E],
    bv: View,
    c: &mut [E],
    cv: View,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(av.last(m, k) < a.len(), "gemm: A view out of bounds");
    assert!(bv.last(k, n) < b.len(), "gemm: B view out of bounds");
    assert!(cv.last(m, n) < c.len(), "gemm: C view out of bounds");
    // SAFETY: the asserts above bound every addressed element, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        E::gemm_raw(
            m,
            k,
            n,
            E::one(),
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            E::one(),
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Geometry of a 1-D cross-correlation `y = x * w` with
/// `x: [batch, cin, t_in]`, `w: [cout, cin / groups, kw]`, `y: [batch, cout, t_out]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// Output positions `[lo, hi)` whose tap `j` reads inside the signal.
    fn tap_range(&self, j: usize) -> (usize, usize) {
        let lo = if j >= self.pad {
            0
        } else {
            (self.pad - j).div_ceil(self.stride)
        };
        if self.t_in + self.pad < j + 1 {
            return (0, 0);
        }
        let hi = ((self.t_in - 1 + self.pad - j) / self.stride + 1).min(self.t_out);
        (lo.min(hi), hi)
    }

    /// Input index read by output position `t` through tap `j`.
    fn src(&self, t: usize, j: usize) -> usize {
        t * self.stride + j - self.pad
    }
}

fn axpy<E: Element>(a: E, x: &[E], y: &mut [E]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (xa, xb) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += xa[k] * xb[k];
        }
    }
    let mut s = acc.iter().copied().sum::<E>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += conv(x, w)`.
pub(crate) fn conv_forward<E: Element>(x: &[E], w: &[E], y: &mut [E], g: ConvGeom) {
    if g.depthwise() {
        y.par_chunks_mut(g.t_out).enumerate().for_each(|(row, yr)| {
            let ch = row % g.cout;
            let xr = &x[row * g.t_in..(row + 1) * g.t_in];
            let wr = &w[ch * g.kw..(ch + 1) * g.kw];
            for (j, &wj) in wr.iter().enumerate() {
                let (lo, hi) = g.tap_range(j);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let s = g.src(lo, j);
                    axpy(wj, &xr[s..s + hi - lo], &mut yr[lo..hi]);
                } else {
                    for t in lo..hi {
                        yr[t] += wj * xr[g.src(t, j)];
                    }
                }
            }
        });
        return;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for b in 0..g.batch {
        for grp in 0..g.groups {
            for j in 0..g.kw {
                let (lo, hi) = g.tap_range(j);
                if lo >= hi {
                    continue;
                }
                let a = View::new(grp * cout_g * cin_g * g.kw + j, cin_g * g.kw, g.kw);
                let xb = View::new(
                    (b * g.cin + grp * cin_g) * g.t_in + g.src(lo, j),
                    g.t_in,
                    g.stride,
                );
                let yc = View::new((b * g.cout + grp * cout_g) * g.t_out + lo, g.t_out, 1);
                gemm_acc(cout_g, cin_g, hi - lo, w, a, x, xb, y, yc);
            }
        }
    }
}

/// `dx += conv^T(dy, w)`: the adjoint of [`conv_forward`] with respect to `x`.
pub(crate) fn conv_backward_input<E: Element>(dy: &[E], w: &[E], dx: &mut [E], g: ConvGeom) {
    if g.depthwise() {
        dx.par_chunks_mut(g.t_in).enumerate().for_each(|(row, dxr)| {
            let ch = row % g.cin;
            let dyr = &dy[row * g.t_out..(row + 1) * g.t_out];
            let wr = &w[ch * g.kw..(ch + 1) * g.kw];
            for (j, &wj) in wr.iter().enumerate() {
                let (lo, hi) = g.tap_range(j);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let s = g.src(lo, j);
                    axpy(wj, &dyr[lo..hi], &mut dxr[s..s + hi - lo]);
                } else {
                    for t in lo..hi {
                        dxr[g.src(t, j)] += wj * dyr[t];
                    }
                }
            }
        });
        return;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for b in 0..g.batch {
        for grp in 0..g.groups {
            for j in 0..g.kw {
                let (lo, hi) = g.tap_range(j);
                if lo >= hi {
                    continue;
                }
                // A = W_j^T: (ci, co) -> w[(grp*cout_g + co), ci, j]
                let a = View::new(grp * cout_g * cin_g * g.kw + j, g.kw, cin_g * g.kw);
                let bv = View::new((b * g.cout + grp * cout_g) * g.t_out + lo, g.t_out, 1);
                let cv = View::new(
                    (b * g.cin + grp * cin_g) * g.t_in + g.src(lo, j),
                    g.t_in,
                    g.stride,
                );
                gemm_acc(cin_g, cout_g, hi - lo, w, a, dy, bv, dx, cv);
            }
        }
    }
}

/// `dw += sum_t dy[t] x[src(t)]^T`.
pub(crate) fn conv_backward_weight<E: Element>(dy: &[E], x: &[E], dw: &mut [E], g: ConvGeom) {
    if g.depthwise() {
        dw.par_chunks_mut(g.kw).enumerate().for_each(|(ch, dwr)| {
            for b in 0..g.batch {
                let row = b * g.cin + ch;
                let xr = &x[row * g.t_in..(row + 1) * g.t_in];
                let dyr = &dy[row * g.t_out..(row + 1) * g.t_out];
                for (j, acc) in dwr.iter_mut().enumerate() {
                    let (lo, hi) = g.tap_range(j);
                    if lo >= hi {
                        continue;
                    }
                    *acc += if g.stride == 1 {
                        let s = g.src(lo, j);
                        dot(&dyr[lo..hi], &xr[s..s + hi - lo])
                    } else {
                        (lo..hi).map(|t| dyr[t] * xr[g.src(t, j)]).sum()
                    };
                }
            }
        });
        return;
    }
    let (cin_g, cout_g) = (g.cin_g(), g.cout_g());
    for b in 0..g.batch {
        for grp in 0..g.groups {
            for j in 0..g.kw {
                let (lo, hi) = g.tap_range(j);
                if lo >= hi {
                    continue;
                }
                let a = View::new((b * g.cout + grp * cout_g) * g.t_out + lo, g.t_out, 1);
                let bv = View::new(
                    (b * g.cin + grp * cin_g) * g.t_in + g.src(lo, j),
                    g.stride,
                    g.t_in,
                );
                let cv = View::new(grp * cout_g * cin_g * g.kw + j, cin_g * g.kw, g.kw);
                gemm_acc(cout_g, hi - lo, cin_g, dy, a, x, bv, dw, cv);
            }
        }
    }
}

/// Batched `c[i] = op(a[i]) op(b[i])` where `op` optionally transposes the
/// trailing two dimensions. `a` is stored `[batch, m, k]` (or `[batch, k, m]`
/// when `ta`), `b` is `[batch, k, n]` (or `[batch, n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<E: Element>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    ta: bool,
    b: &[E],
    tb: bool,
) -> Vec<E> {
    let mut c = vec![E::zero(); batch * m * n];
    if m * n == 0 {
        return c;
    }
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| {
        let av = if ta {
            View::new(i * m * k, 1, m)
        } else {
            View::new(i * m * k, k, 1)
        };
        let bv = if tb {
            View::new(i * k * n, 1, k)
        } else {
            View::new(i * k * n, n, 1)
        };
        gemm_acc(m, k, n, a, av, b, bv, ci, View::new(0, n, 1));
    });
    c
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `x` with axes reordered so output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<E: Element>(x: &[E], shape: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    // Copy whole runs along the innermost output axis.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|t| x[base + t * inner_stride]));
        }
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
