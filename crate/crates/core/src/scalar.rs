//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::ToPrimitive;

/// Floating-point scalar usable by the solvers: `f32` or `f64`.
///
/// All oracle tolerances in the test-suite are calibrated for `f64`; `f32`
/// is supported for throughput experiments.
pub trait Scalar: RealField + Copy + ToPrimitive + Debug + Display + LowerExp + 'static {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn cast<T: Scalar>(x: f64) -> T {
    nalgebra::convert(x)
}

/// Converts a scalar back to `f64` for reporting.
#[inline]
pub fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}
