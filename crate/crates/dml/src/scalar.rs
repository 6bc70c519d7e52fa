//! Scalar abstraction for the numeric core.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar usable by the tensor engine and the algorithms built
/// on top of it. Implemented by `f32` and `f64` through the blanket impl.
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
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    fn from_config(x: f64) -> Self {
        Self::from_f64(x).expect("scalar conversion from f64")
    }

    /// Widening conversion used for logging and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl<T> Scalar for T where
    T: Float
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
        + 'static
{
}

/// Shorthand for converting an `f64` constant into the active scalar type.
pub fn s<S: Scalar>(x: f64) -> S {
    S::from_config(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<S: Scalar>(xs: &[S]) -> S {
        xs.iter().copied().sum()
    }

    #[test]
    fn blanket_impl_covers_both_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0f32);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0f64);
        assert_eq!(s::<f32>(0.25), 0.25f32);
        assert_eq!(s::<f64>(0.25), 0.25f64);
    }
}
