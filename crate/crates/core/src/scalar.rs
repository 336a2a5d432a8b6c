//! Scalar abstraction for the tensor engine.
//!
//! All numerics are written against [`Scalar`] so the same code runs in
//! `f32` or `f64`. The crate-root aliases fix `f64`, which is what the
//! gradient checks and the checkpoint format assume.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable as tensor element.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants baked into the math.
    #[inline]
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable in scalar type")
    }

    /// Widening conversion used by serialization and host-side math.
    #[inline]
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar representable as f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for `S::from_f64_c` at call sites heavy with constants.
#[inline]
pub fn sc<S: Scalar>(v: f64) -> S {
    S::from_f64_c(v)
}
