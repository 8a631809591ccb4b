//! Scalar abstraction shared by every differentiable stage.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, NumAssignOps};

/// Floating point type the neural stages are generic over.
///
/// Materials are stored as `f32` on disk; `f64` is mostly useful for
/// gradient checks.
pub trait Real:
    Float + FloatConst + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
    #[inline]
    fn cst(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    #[inline]
    fn from_usize(v: usize) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().unwrap()
    }
}

impl<T> Real for T where
    T: Float + FloatConst + NumAssignOps + Sum + Default + Debug + Display + Send + Sync + 'static
{
}
