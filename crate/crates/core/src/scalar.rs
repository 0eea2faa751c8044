//! Scalar abstraction for the numeric kernels.
//!
//! Tensor storage, the autodiff engine, and the linear-algebra and
//! special-function kernels are written against [`Scalar`] so they work
//! for `f32` and `f64` alike. The modeling layers pin `f64` via the
//! crate-root aliases.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable throughout the numeric core.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }

    /// Lossy conversion to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `ln(1 + e^x)` computed without overflow in either tail.
    fn softplus(self) -> Self {
        // max(x, 0) + ln(1 + e^{-|x|})
        self.max(Self::zero()) + self.abs().neg().exp().ln_1p()
    }

    /// Logistic function `1 / (1 + e^{-x})`.
    fn sigmoid(self) -> Self {
        if self >= Self::zero() {
            (Self::one() + self.neg().exp()).recip()
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }

    /// `ln sigma(x) = -softplus(-x)`, safe in both tails.
    fn log_sigmoid(self) -> Self {
        self.neg().softplus().neg()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_tails_are_finite_and_tight() {
        assert!((800.0f64.softplus() - 800.0).abs() < 1e-12);
        assert!((-800.0f64).softplus() >= 0.0);
        assert!((-800.0f64).softplus() < 1e-300);
        let x = 0.37f64;
        assert!((x.softplus() - (1.0 + x.exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_matches_definition_and_is_symmetric() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        let x = 2.0f64;
        assert!((x.sigmoid() - 1.0 / (1.0 + (-x).exp())).abs() < 1e-16);
        assert!((x.sigmoid() + (-x).sigmoid() - 1.0).abs() < 1e-15);
        // no overflow far in the tails
        assert_eq!((-900.0f64).sigmoid(), 0.0);
        assert_eq!(900.0f64.sigmoid(), 1.0);
    }

    #[test]
    fn generic_over_f32() {
        let x: f32 = 1.5;
        assert!((x.sigmoid() - 1.0 / (1.0 + (-1.5f32).exp())).abs() < 1e-6);
    }
}
