use num_traits::Float;

/// Element type for the differentiable-array engine.
///
/// Training and storage use `f32`; the `f64` instantiation exists as the
/// reference path inside gradient-check tests.
pub trait Scalar: Float + std::fmt::Debug + std::fmt::Display + Copy + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn into_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline]
    fn into_f32(self) -> f32 {
        self as f32
    }
}
