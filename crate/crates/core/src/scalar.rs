use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the float inference path.
///
/// Implemented for `f32` (the production type) and `f64`. On-disk tensors
/// and weights are always little-endian `f32` and are converted on load.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + 'static
{
    fn cast_f32(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    #[inline(always)]
    fn cast_f32(v: f32) -> Self {
        v
    }

    #[inline(always)]
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn cast_f32(v: f32) -> Self {
        v as f64
    }

    #[inline(always)]
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
