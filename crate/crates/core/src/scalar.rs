use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rustfft::FftNum;

/// Floating point sample type used by every tensor and solver.
///
/// Implemented for `f32` and `f64`. Pipelines default to `f64`; the
/// `f32` instantiation exists for memory-bound runs on large stacks.
pub trait Real:
    Float + FftNum + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts a literal or configuration value into this scalar type.
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 is representable in every Real")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("Real values convert to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
