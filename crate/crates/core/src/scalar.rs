//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of a [`Tensor`](crate::tensor::Tensor): `f32` or `f64`.
///
/// Everything numeric in the crate is generic over this trait. Training,
/// serialization and the oracle comparisons run on `f64`.
pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Gauss error function.
    fn erf(self) -> Self;

    /// Lossy conversion from `f64`; constants and RNG draws go through here.
    #[inline]
    fn cast(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    /// Standard normal CDF.
    #[inline]
    fn norm_cdf(self) -> Self {
        let half = Self::cast(0.5);
        half * (Self::one() + (self * Self::FRAC_1_SQRT_2()).erf())
    }

    /// Standard normal density.
    #[inline]
    fn norm_pdf(self) -> Self {
        let inv_sqrt_2pi = Self::FRAC_1_SQRT_2() * Self::FRAC_2_SQRT_PI() * Self::cast(0.5);
        inv_sqrt_2pi * (-(self * self) * Self::cast(0.5)).exp()
    }
}

impl Scalar for f32 {
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_helpers() {
        assert!((0.0f64.norm_cdf() - 0.5).abs() < 1e-15);
        assert!((0.0f64.norm_pdf() - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!((1.959_963_984_540_054f64.norm_cdf() - 0.975).abs() < 1e-12);
        assert!((0.0f32.norm_pdf() - 0.398_942_3).abs() < 1e-6);
    }
}
