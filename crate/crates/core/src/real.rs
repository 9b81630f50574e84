use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of tensors.
///
/// Training runs in `f32`. The `f64` instantiation of the same kernels exists
/// so verification harnesses (gradient checks, optimizer oracles) can work
/// below fp32 rounding noise.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Nearest bfloat16-representable value, kept in `Self` storage.
    fn round_bf16(self) -> Self;

    fn from_usize(n: usize) -> Self {
        Self::from_f64(n as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn round_bf16(self) -> Self {
        crate::precision::to_bf16(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    // Narrowing to f32 first may double-round; only verification code runs
    // mixed precision in f64.
    #[inline]
    fn round_bf16(self) -> Self {
        crate::precision::to_bf16(self as f32) as f64
    }
}
