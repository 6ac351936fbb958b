use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating point element type used throughout the crate.
///
/// Inference and training run in `f32`; gradient checks run the same code in
/// `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }

    /// Round to the nearest IEEE binary16 value, keeping the storage type.
    #[inline]
    fn round_half(self) -> Self {
        Self::of(half::f16::from_f64(self.f64()).to_f64())
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
