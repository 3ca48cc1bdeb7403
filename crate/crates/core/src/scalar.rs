//! Scalar abstraction: the math core is generic over `f32` / `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point scalar for descriptors, models and metrics.
///
/// Everything numeric in this crate is written against this trait; the
/// concrete aliases at the crate root pin the shipped pipeline to `f64`
/// (index files narrow to `f32` on serialization).
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
}

/// Widen to `f64` (exact for both supported scalars).
#[inline]
pub fn to_f64<F: Real>(x: F) -> f64 {
    x.to_f64().expect("Real scalars convert to f64")
}

/// Narrow from `f64`; rounds when `F = f32`.
#[inline]
pub fn from_f64<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("f64 converts to Real scalar")
}
