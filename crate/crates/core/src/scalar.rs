use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type shared by tensors, matrices and the network kit.
///
/// Training runs in `f32`; gradient checking and the SVD kernel run in `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless widening to `f64`.
    fn to_f64_lossless(self) -> f64;
    /// Nearest-value conversion from `f64`.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64_lossless(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}

/// Shorthand for turning a literal into any scalar type.
#[inline]
pub fn lit<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
