//! Scalar abstraction: every numerical kernel in this crate is generic over
//! the element type. Tests and acceptance checks run at f64; f32 is available
//! for faster training runs.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors, implemented for f32 and f64.
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
    /// Short dtype tag used in binary file headers.
    const DTYPE: &'static str;

    /// Attention mask sentinel: the most negative finite value of the dtype.
    /// `exp(sentinel - rowmax)` underflows to exactly 0.0 for any realistic
    /// row maximum, so masked weights come out of softmax as exact zeros
    /// without ever materializing a NaN or an infinity in a kernel output.
    fn mask_sentinel() -> Self {
        Self::min_value()
    }

    fn from64(x: f64) -> Self {
        Self::from(x).expect("f64 conversion")
    }

    fn to64(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
