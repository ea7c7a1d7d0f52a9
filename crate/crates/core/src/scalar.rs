//! Scalar abstraction so the numerical core runs on `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};

/// Floating-point element type for all numerical routines in this crate.
///
/// Implemented for `f32` and `f64`. Experiments and the CLI use the
/// [`crate::Real`] alias (`f64`); `f32` instantiations are supported for
/// callers that want the smaller footprint.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumCast
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, panicking only for non-representable
    /// values (never for finite inputs on f32/f64).
    fn c(value: f64) -> Self {
        <Self as NumCast>::from(value).expect("finite f64 converts to scalar")
    }

    /// Conversion to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn from_usize_lossy(value: usize) -> Self {
        Self::c(value as f64)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::c(0.5), 0.5);
        assert_eq!(f32::c(0.25), 0.25f32);
        assert_eq!(f64::from_usize_lossy(7), 7.0);
        assert_eq!(1.5f32.to_f64_lossy(), 1.5);
    }
}
