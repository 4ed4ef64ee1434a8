use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;
use rustfft::FftNum;

/// Scalar type a [`Tensor`](super::Tensor) can hold.
///
/// Training and inference run in `f32`; `f64` exists so gradient checks can
/// be run with finite-difference errors far below the `f32` noise floor.
pub trait Element: Float + FftNum + Default + Display + Debug + Sum + AddAssign + MulAssign + Send + Sync + 'static {
    const NAME: &'static str;

    /// Converts a literal; every value used by the crate is representable.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `v <- exp(v)` in place.
    fn exp_in_place(xs: &mut [Self]) {
        for v in xs {
            *v = v.exp();
        }
    }

    /// `C <- alpha * A B + beta * C` over strided row/column views.
    ///
    /// # Safety
    /// Every addressed element of `a`, `b` and `c` must be in bounds, and `c`
    /// must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Element for f32 {
    const NAME: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    /// Branch-free range reduction plus a degree-7 polynomial; relative
    /// error below 2e-7 over the finite range, so the loop vectorizes.
    fn exp_in_place(xs: &mut [Self]) {
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_145_75;
        const LN2_LO: f32 = 1.428_606_8e-6;
        const SHIFTER: f32 = 12_582_912.0; // 1.5 * 2^23
        for v in xs.iter_mut() {
            let x = *v;
            let c = x.clamp(-87.0, 88.0);
            let t = c * LOG2E + SHIFTER;
            let n = t - SHIFTER;
            let r = (c - n * LN2_HI) - n * LN2_LO;
            let p = 1.0
                + r * (1.0
                    + r * (0.5
                        + r * (1.0 / 6.0
                            + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
            let bits = ((t.to_bits() as i32 - SHIFTER.to_bits() as i32 + 127) as u32) << 23;
            let y = p * f32::from_bits(bits);
            *v = if x.is_nan() {
                x
            } else if x < -87.0 {
                0.0
            } else if x > 88.0 {
                f32::INFINITY
            } else {
                y
            };
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
