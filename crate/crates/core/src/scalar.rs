//! Scalar abstraction over the floating point element type.
//!
//! Everything numeric in this crate is generic over [`Scalar`] so the same
//! model code runs at `f32` for training and checkpoints and at `f64` where
//! higher precision matters, notably finite-difference gradient oracles in
//! the test suite.

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};
use std::fmt::{Debug, Display};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + NumCast + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts a configuration value into the working precision.
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("finite f64 converts to any Scalar impl")
    }

    /// Widens to f64 for reporting and file output.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cast_roundtrips_through_f64() {
        let x: f32 = Scalar::cast(0.25);
        assert_eq!(x, 0.25f32);
        assert_eq!(x.as_f64(), 0.25f64);

        let y: f64 = Scalar::cast(1.0 / 3.0);
        assert_eq!(y, 1.0 / 3.0);
    }

    fn sum_generic<S: Scalar>(xs: &[S]) -> S {
        xs.iter().fold(S::zero(), |acc, &x| acc + x)
    }

    #[test]
    fn generic_code_runs_at_both_precisions() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0);
    }
}
