//! Scalar abstraction shared by the numerical modules.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the estimators and simulators are generic over.
///
/// Implemented for `f32` and `f64`. Tolerances throughout the crate are
/// specified in `f64` and converted with [`Real::lit`], so the documented
/// thresholds are only meaningful at `f64` precision.
pub trait Real: RealField + Copy + ToPrimitive {
    /// Converts an `f64` literal into the scalar type.
    fn lit(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 literal representable")
    }

    fn from_count(n: usize) -> Self {
        <Self as FromPrimitive>::from_usize(n).expect("count representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
