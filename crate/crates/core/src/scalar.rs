//! Scalar abstraction for the numeric kernels.
//!
//! Everything that is pure math (tensors, autodiff, geometry, attention
//! metrics) is generic over [`Scalar`]; the lab pins `f64` at the crate
//! root because finite-difference gradient checks need the precision,
//! while attention dumps on disk use `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable in every numeric kernel of this crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` literals and config values.
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts to scalar")
    }

    /// Widen to `f64` for reporting and serialization.
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip<S: Scalar>(v: f64) -> f64 {
        S::from_f64_lossy(v).to_f64_lossy()
    }

    #[test]
    fn conversions_roundtrip() {
        assert_eq!(roundtrip::<f64>(0.3125), 0.3125);
        assert_eq!(roundtrip::<f32>(0.3125), 0.3125); // exactly representable
    }
}
