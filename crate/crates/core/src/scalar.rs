//! Floating-point scalar abstraction shared by the geometric primitives.

use nalgebra::RealField;
use num_traits::FromPrimitive;

/// Real scalar usable by the geometry code: `f32` or `f64`.
pub trait Scalar: RealField + Copy + FromPrimitive {
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    /// Angle below which closed-form trigonometric ratios switch to Taylor series.
    fn small_angle() -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn small_angle() -> Self {
        1e-4
    }
}

impl Scalar for f32 {
    #[inline]
    fn small_angle() -> Self {
        1e-2
    }
}
