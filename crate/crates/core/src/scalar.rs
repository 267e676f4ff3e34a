use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used for vector storage and similarity arithmetic.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    fn from_f64_lossy(v: f64) -> Self;

    /// Round to the nearest value representable as `f32`.
    ///
    /// Index storage is 32-bit on disk; rounding at build time keeps an
    /// in-memory index bit-identical to one reloaded from a file.
    fn round_to_f32(self) -> Self;

    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }

    fn round_to_f32(self) -> Self {
        self
    }

    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64_lossy(v: f64) -> Self {
        v
    }

    fn round_to_f32(self) -> Self {
        self as f32 as f64
    }

    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}
