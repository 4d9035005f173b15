use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

/// Floating-point element type for the numeric kernels.
///
/// Runtime code uses `f32`; gradient checks instantiate the same kernels at
/// `f64` so finite differences have enough precision to resolve a 1e-4
/// relative error budget.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    fn from_f32(x: f32) -> Self {
        Self::from_f64(x as f64)
    }
    fn to_f32(self) -> f32 {
        self.to_f64() as f32
    }
    fn half() -> Self {
        Self::from_f64(0.5)
    }
    fn two() -> Self {
        Self::from_f64(2.0)
    }
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
