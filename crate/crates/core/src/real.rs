//! Scalar abstraction shared by the geometric code.

use std::fmt::{Debug, Display};

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable by the geometry, sampling and meshing code: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssign + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`; used for literals.
    fn lit(v: f64) -> Self;

    /// Widening conversion used for reductions, which always accumulate in `f64`.
    #[inline]
    fn to_acc(self) -> f64 {
        self.to_f64_lossy()
    }

    #[inline]
    fn from_acc(v: f64) -> Self {
        Self::lit(v)
    }

    fn to_f64_lossy(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
