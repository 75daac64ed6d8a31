//! Elementwise nonlinearities with first and second derivatives.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Smooth (or piecewise-linear) activation applied on hidden layers.
///
/// `SiLU` is the default: the energy loss differentiates through the
/// classifier Jacobian, which needs a twice-differentiable nonlinearity.
/// `ReLU` is available but second-order queries reject it since its second
/// derivative vanishes almost everywhere. `Square` exists for nets with
/// analytically known Hessians (quadratic forms), used by diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    SiLU,
    ReLU,
    Square,
}

impl Activation {
    pub fn eval<T: Real>(self, y: T) -> T {
        match self {
            Activation::SiLU => y * sigmoid(y),
            Activation::ReLU => y.max(T::zero()),
            Activation::Square => y * y,
        }
    }

    /// First derivative at `y`. ReLU uses the convention `relu'(0) = 0`.
    pub fn deriv<T: Real>(self, y: T) -> T {
        match self {
            Activation::SiLU => {
                let s = sigmoid(y);
                s * (T::one() + y * (T::one() - s))
            }
            Activation::ReLU => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Square => T::of(2.0) * y,
        }
    }

    pub fn second_deriv<T: Real>(self, y: T) -> T {
        match self {
            Activation::SiLU => {
                let s = sigmoid(y);
                s * (T::one() - s) * (T::of(2.0) + y * (T::one() - T::of(2.0) * s))
            }
            Activation::ReLU => T::zero(),
            Activation::Square => T::of(2.0),
        }
    }

    /// Whether second-order queries are well-defined.
    pub fn is_smooth(self) -> bool {
        !matches!(self, Activation::ReLU)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::SiLU => 0,
            Activation::ReLU => 1,
            Activation::Square => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::SiLU),
            1 => Some(Activation::ReLU),
            2 => Some(Activation::Square),
            _ => None,
        }
    }
}

fn sigmoid<T: Real>(y: T) -> T {
    T::one() / (T::one() + (-y).exp())
}
