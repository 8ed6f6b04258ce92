//! Floating-point abstraction shared by the closed-form parts of the crate.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive};

/// Real scalar type: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Complementary error function.
    fn erfc(self) -> Self;
    /// Natural log of the gamma function.
    fn ln_gamma(self) -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Real for f64 {
    fn erfc(self) -> Self {
        libm::erfc(self)
    }
    fn ln_gamma(self) -> Self {
        libm::lgamma(self)
    }
}

impl Real for f32 {
    fn erfc(self) -> Self {
        libm::erfcf(self)
    }
    fn ln_gamma(self) -> Self {
        libm::lgammaf(self)
    }
}

/// Standard normal CDF.
pub fn norm_cdf<F: Real>(x: F) -> F {
    F::lit(0.5) * (-x / F::SQRT_2()).erfc()
}

/// Standard normal density.
pub fn norm_pdf<F: Real>(x: F) -> F {
    let inv_sqrt_2pi = F::FRAC_1_SQRT_2() * F::FRAC_2_SQRT_PI() * F::lit(0.5);
    inv_sqrt_2pi * (-F::lit(0.5) * x * x).exp()
}
