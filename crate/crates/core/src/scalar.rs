//! Floating-point element types accepted by tensors, layers and training.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type for [`Tensor`](crate::tensor::Tensor) and everything built on it.
///
/// Implemented for `f32` (the deployment type, used by the file format and the
/// quantizer) and `f64` (handy for numerical checks such as finite differences).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or statistic.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Round to nearest, ties to even.
    fn round_half_even(self) -> Self;
}

macro_rules! impl_scalar {
    ($($t:ty)*) => ($(
        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            #[inline]
            fn round_half_even(self) -> Self {
                self.round_ties_even()
            }
        }
    )*)
}

impl_scalar!(f32 f64);
