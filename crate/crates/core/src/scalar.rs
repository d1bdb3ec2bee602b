//! Floating-point abstraction shared by the linear-algebra code.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// A real scalar usable by the covariance and criterion code: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive + ToPrimitive + Send + Sync + 'static {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 literal")
    }

    /// Lossy conversion to `f64` (used when handing values to the normal-distribution code).
    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the type.
    fn eps() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    #[inline]
    fn eps() -> Self {
        f64::EPSILON
    }
}
