//! Scalar abstraction shared by every numeric module.
//!
//! All signal, model and inference code is written against [`Scalar`], which
//! is implemented for `f32` and `f64`. Linear algebra comes from
//! `nalgebra::RealField`; conversions to and from primitive floats go through
//! `num_traits`.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real floating-point scalar usable throughout the crate.
pub trait Scalar:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Display + Debug + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    /// Lossy conversion from `usize`.
    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::lit(v as f64)
    }

    /// Widening conversion to `f64`.
    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the concrete type.
    fn eps() -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn eps() -> Self {
        f32::EPSILON
    }
}

impl Scalar for f64 {
    #[inline]
    fn eps() -> Self {
        f64::EPSILON
    }
}

/// Sum of squares of a slice.
pub fn sum_sq<T: Scalar>(xs: &[T]) -> T {
    xs.iter().fold(T::zero(), |acc, &x| acc + x * x)
}

/// Dot product of two equally long slices.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}
