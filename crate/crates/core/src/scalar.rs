//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the model and the optimizers are generic over (`f32`, `f64`
/// or quad-precision [`f128::f128`]).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal. Every `f64` is representable (possibly rounded) in `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// IEEE quad precision (113-bit significand). Used as the finite-difference
/// reference where `f64` roundoff would dominate.
impl Scalar for f128::f128 {}

/// Larger of `a` and `b` by `PartialOrd`; a NaN operand yields the other one.
/// Generic code uses this rather than `Float::max`, which the `f128` crate
/// computes on raw bit patterns (wrong for negative operands).
pub fn max<T: Scalar>(a: T, b: T) -> T {
    if a.is_nan() || b > a {
        b
    } else {
        a
    }
}

/// Counterpart of [`max`].
pub fn min<T: Scalar>(a: T, b: T) -> T {
    if a.is_nan() || b < a {
        b
    } else {
        a
    }
}

/// Left-to-right sum starting from zero.
pub fn sum<T: Scalar>(items: impl IntoIterator<Item = T>) -> T {
    items.into_iter().fold(T::zero(), |acc, x| acc + x)
}
