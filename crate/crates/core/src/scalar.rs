//! Scalar abstraction shared by the numeric kernels.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating point scalar: `f32` or `f64`.
pub trait Scalar: Float + FromPrimitive + NumAssign + Sum + Debug + Display + LowerExp + Send + Sync + 'static {
    /// Converts an `f64` constant into this scalar type.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn max_abs<F: Scalar>(xs: &[F]) -> F {
    xs.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_conversion_roundtrips() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.25), 0.25f32);
        assert_eq!(0.5f32.as_f64(), 0.5);
    }

    #[test]
    fn helpers() {
        assert_eq!(dot(&[1.0, 2.0], &[3.0, 4.0]), 11.0);
        assert_eq!(max_abs(&[1.0f32, -3.0, 2.0]), 3.0);
    }
}
