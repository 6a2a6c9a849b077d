//! Floating-point abstraction shared by the deterministic solvers and diagnostics.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use realfft::FftNum;

/// Real scalar usable by the size-distribution math.
///
/// Implemented for `f32` and `f64`. The FFT bound lets the convolution
/// kernels run at the same precision as the state.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + FftNum
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Send
    + Sync
    + 'static
{
    /// Natural log of the gamma function.
    fn log_gamma(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    /// Conversion from a count or index.
    #[inline]
    fn of(k: usize) -> Self {
        Self::from_usize(k).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    #[inline]
    fn log_gamma(self) -> Self {
        libm::lgamma(self)
    }
}

impl Scalar for f32 {
    #[inline]
    fn log_gamma(self) -> Self {
        libm::lgammaf(self)
    }
}
