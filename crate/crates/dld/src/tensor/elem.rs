//! Scalar element abstraction. Training storage is `f32`; the same tensor
//! and model code instantiates at `f64` so finite-difference verification
//! runs in a 64-bit shadow of the exact computation being shipped.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub trait Elem:
    Copy
    + Clone
    + Debug
    + Default
    + PartialOrd
    + PartialEq
    + Send
    + Sync
    + Add<Output = Self>
    + AddAssign
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self {
        if self > other {
            self
        } else {
            other
        }
    }

    /// C[m x n] (row-major) = alpha * A * B + beta * C, with explicit
    /// row/column strides for A and B so transposed products avoid copies.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

/// Branch-free exp for f32 (Cephes-style degree-5 polynomial plus exponent
/// bit assembly), accurate to ~2 ulp and vectorizable by the compiler where
/// libm calls are not. Training storage is f32, so the approximation error
/// sits at the rounding floor; the f64 shadow keeps libm.
#[inline]
fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_375; // ln2 split high
    const C2: f32 = -2.121_944_4e-4; // ln2 split low
    let x = x.clamp(-87.336, 88.722);
    let n = (x * LOG2E).round_ties_even();
    let r = x - n * C1 - n * C2;
    // e^r on [-ln2/2, ln2/2]
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_6e-1;
    p = p * r + 5e-1;
    let poly = p * r * r + r + 1.0;
    let bits = (((n as i32) + 127) as u32) << 23;
    poly * f32::from_bits(bits)
}

impl Elem for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    const NEG_INFINITY: f32 = f32::NEG_INFINITY;

    fn from_f64(x: f64) -> f32 {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> f32 {
        exp_f32(self)
    }
    fn ln(self) -> f32 {
        f32::ln(self)
    }
    fn tanh(self) -> f32 {
        // Cephes split: odd polynomial near zero (avoids the cancellation in
        // the exp form), 1 - 2/(e^{2|x|}+1) elsewhere.
        let ax = self.abs();
        if ax < 0.625 {
            let z = self * self;
            let mut p = -5.704_988_7e-3f32;
            p = p * z + 2.063_908_9e-2;
            p = p * z - 5.373_971_6e-2;
            p = p * z + 1.333_144_2e-1;
            p = p * z - 3.333_328_2e-1;
            p * z * self + self
        } else {
            let e = exp_f32(2.0 * ax.min(9.1));
            let t = 1.0 - 2.0 / (e + 1.0);
            if self < 0.0 {
                -t
            } else {
                t
            }
        }
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    fn abs(self) -> f32 {
        f32::abs(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
                n as isize, 1,
            );
        }
    }
}

impl Elem for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    const NEG_INFINITY: f64 = f64::NEG_INFINITY;

    fn from_f64(x: f64) -> f64 {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    fn tanh(self) -> f64 {
        f64::tanh(self)
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || n == 0 || k == 0 {
            return;
        }
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
                n as isize, 1,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_libm_to_float_precision() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let fast = Elem::exp(x) as f64;
            let exact = (x as f64).exp();
            let rel = ((fast - exact) / exact).abs();
            if rel > worst {
                worst = rel;
            }
            x += 0.0137;
        }
        assert!(worst < 5e-7, "worst exp rel err {worst}");
    }

    #[test]
    fn fast_tanh_matches_libm_to_float_precision() {
        let mut worst = 0.0f64;
        let mut x = -12.0f32;
        while x < 12.0 {
            let fast = Elem::tanh(x) as f64;
            let exact = (x as f64).tanh();
            let denom = exact.abs().max(1e-6);
            let rel = ((fast - exact) / denom).abs();
            if rel > worst {
                worst = rel;
            }
            x += 0.0113;
        }
        assert!(worst < 1e-6, "worst tanh rel err {worst}");
        assert_eq!(Elem::tanh(0.0f32), 0.0);
        assert!(Elem::tanh(20.0f32) == 1.0 && Elem::tanh(-20.0f32) == -1.0);
    }
}
