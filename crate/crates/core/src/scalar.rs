//! Floating point scalar abstraction.
//!
//! Every numeric routine in the crate is written against [`Scalar`] so the
//! same code runs in `f32` or `f64`. Matrix products go through ndarray, which
//! dispatches `f32`/`f64` to a blocked GEMM.

use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real floating point type usable by the network, losses and metrics.
pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Tag written into model files.
    const NAME: &'static str;

    /// Conversion from `f64`, rounding to nearest for narrower types.
    fn of(v: f64) -> Self;

    /// Widening conversion to `f64` (exact for `f32` and `f64`).
    fn widen(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}
