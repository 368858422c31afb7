//! Floating-point element type shared by the network and the flow code.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// `f32` for training runs, `f64` for gradient checks and oracles.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Tag written into checkpoint headers.
    const DTYPE: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// Converts a whole matrix between element types.
pub fn cast<A: Real, B: Real>(a: &ndarray::Array2<A>) -> ndarray::Array2<B> {
    a.mapv(|v| B::of(v.f64()))
}

pub(crate) fn all_finite<F: Real>(a: &ndarray::Array2<F>) -> bool {
    a.iter().all(|v| v.is_finite())
}
