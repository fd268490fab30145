//! Scalar abstraction so the same graph code runs in `f32` (training,
//! inference, checkpoints) and `f64` (high-precision verification).

use core::fmt::Debug;
use core::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Default
    + PartialEq
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Short type name, recorded in checkpoints and diagnostics.
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    fn sigmoid(self) -> Self {
        // split by sign so exp never overflows
        if self >= Self::ZERO {
            Self::ONE / (Self::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::ONE + e)
        }
    }

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// `c = alpha * a * b + beta * c` for row/column strided operands.
    ///
    /// # Safety
    /// Strides must keep every addressed element inside its slice. The
    /// safe wrappers in [`crate::tensor`] check this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
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

macro_rules! math {
    ($std:ident, $libm:path) => {
        #[cfg(feature = "std")]
        #[inline]
        fn $std(self) -> Self {
            <Self>::$std(self)
        }
        #[cfg(not(feature = "std"))]
        #[inline]
        fn $std(self) -> Self {
            $libm(self)
        }
    };
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NAME: &'static str = "f32";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    math!(exp, libm::expf);
    math!(ln, libm::logf);
    /// Odd rational approximation, within 4 ulp of the exact value. It is
    /// branch-free apart from selects, so loops over it vectorise; it is far
    /// cheaper than the library `tanhf`, and attention evaluates it for every
    /// memory position at every step.
    #[inline]
    fn tanh(self) -> Self {
        let x = if self > 7.905_311 {
            7.905_311
        } else if self < -7.905_311 {
            -7.905_311
        } else {
            self
        };
        let x2 = x * x;
        let p = (((((-2.760_768_5e-16f32 * x2 + 2.000_188e-13) * x2 - 8.604_671_5e-11) * x2 + 5.122_297e-8) * x2
            + 1.485_722_4e-5)
            * x2
            + 6.372_619_3e-4)
            * x2
            + 4.893_524_6e-3;
        let q = ((1.198_258_4e-6f32 * x2 + 1.185_347_1e-4) * x2 + 2.268_434_6e-3) * x2 + 4.893_525e-3;
        let r = x * p / q;
        if Real::abs(x) < 0.0004 {
            x
        } else {
            r
        }
    }
    /// `(1 + tanh(x/2)) / 2`: absolute error below 3e-7, vectorisable.
    #[inline]
    fn sigmoid(self) -> Self {
        0.5 + 0.5 * Real::tanh(0.5 * self)
    }
    math!(sqrt, libm::sqrtf);
    #[inline]
    fn abs(self) -> Self {
        if self < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }

    unsafe fn gemm(
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const NAME: &'static str = "f64";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    math!(exp, libm::exp);
    math!(ln, libm::log);
    math!(tanh, libm::tanh);
    math!(sqrt, libm::sqrt);
    #[inline]
    fn abs(self) -> Self {
        if self < 0.0 {
            -self
        } else {
            self
        }
    }
    #[inline]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    unsafe fn gemm(
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(Real::sigmoid(0.0f32), 0.5);
        assert!(Real::sigmoid(-200.0f32) >= 0.0);
        assert_eq!(Real::sigmoid(200.0f32), 1.0);
        assert!(Real::sigmoid(-800.0f64).is_finite());
        let mut x = -30.0f32;
        while x < 30.0 {
            let want = Real::sigmoid(x as f64);
            assert!((Real::sigmoid(x) as f64 - want).abs() < 3e-7, "{x}");
            x += 0.0107;
        }
    }

    #[test]
    fn f32_tanh_is_within_four_ulp() {
        let mut x = -12.0f32;
        while x < 12.0 {
            let got = Real::tanh(x);
            let want = Real::tanh(x as f64);
            let ulp = 4.0 * f32::EPSILON as f64 * want.abs().max(f32::MIN_POSITIVE as f64);
            assert!((got as f64 - want).abs() <= ulp, "{x}: {got} vs {want}");
            x += 0.000731;
        }
        assert_eq!(Real::tanh(0.0f32), 0.0);
        assert_eq!(Real::tanh(-1e-30f32), -1e-30);
    }
}
