//! Floating-point abstraction: the whole numeric stack is generic over
//! [`Scalar`] so the same code runs in standard precision for training and in
//! wide precision for gradient checking.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type for tensors, kernels, and the tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from `f64` for constants and config values.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant must convert")
    }

    /// Widen to `f64` for reporting and cross-precision comparison.
    fn to_f64_c(self) -> f64 {
        self.to_f64().expect("scalar must widen to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Standard precision used for training and inference.
pub type Real = f32;

/// Wide precision used by the gradient checker.
pub type Wide = f64;

/// Additive bias applied to disallowed attention scores. Large enough that
/// `exp(bias - row_max)` underflows to exactly zero after max subtraction,
/// in both precisions.
pub fn mask_bias<S: Scalar>() -> S {
    S::from_f64_c(-1e9)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_bias_zeroes_out_after_softmax_shift() {
        // exp(-1e9 - 0) underflows to 0.0 in both precisions.
        let b32: f32 = mask_bias();
        let b64: f64 = mask_bias();
        assert_eq!(b32.exp(), 0.0);
        assert_eq!(b64.exp(), 0.0);
    }

    #[test]
    fn conversions_round_trip() {
        let x: f32 = Scalar::from_f64_c(0.25);
        assert_eq!(x, 0.25f32);
        assert_eq!(x.to_f64_c(), 0.25f64);
    }
}
