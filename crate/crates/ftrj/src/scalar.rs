//! Scalar abstraction for the numerical kernels.
//!
//! Everything numeric in this crate is written against [`Real`] so the same
//! kernels instantiate at `f32` and `f64`. The shipped pipelines use `f64`
//! (see the aliases at the crate root); the property suites rely on tolerances
//! tighter than single-precision noise.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable by every kernel in the crate.
pub trait Real:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + Sum
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from `f64`, used for constants and RNG draws.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant not representable")
    }

    /// Lossy conversion to `f64`, used for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + NumAssignOps
        + FromPrimitive
        + ToPrimitive
        + Sum
        + ScalarOperand
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm<T: Real>(v: &[T]) -> T {
        v.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    #[test]
    fn kernels_instantiate_at_both_widths() {
        assert!((norm(&[3.0f32, 4.0]) - 5.0).abs() < 1e-6);
        assert!((norm(&[3.0f64, 4.0]) - 5.0).abs() < 1e-12);
        assert_eq!(f32::of(0.5), 0.5f32);
        assert_eq!(2.0f64.to_f64_lossy(), 2.0);
    }
}
