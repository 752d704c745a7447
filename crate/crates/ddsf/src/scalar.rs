//! Scalar abstraction: every numeric routine in the crate is generic over a
//! real scalar implementing [`Scalar`] (`f32` and `f64` in practice).

use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar type usable throughout the crate.
///
/// `nalgebra::RealField` supplies the field operations and elementary
/// functions, the `num-traits` casts supply conversion from literal `f64`
/// constants (tolerances, config defaults).
pub trait Scalar: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default {
    /// Convert an `f64` constant, truncating precision as needed.
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constants convert to any Scalar")
    }

    /// Positive infinity (used for one-sided constraint bounds).
    fn infinity() -> Self {
        Self::from_f64_lossy(f64::INFINITY)
    }
}

impl<T> Scalar for T where T: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy + Default {}

/// Shorthand for converting an `f64` constant into the working scalar.
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn casts_round_trip_for_both_widths() {
        assert_eq!(cast::<f64>(0.1), 0.1);
        assert_eq!(cast::<f32>(0.5), 0.5f32);
        assert!(f32::infinity().is_infinite());
        assert!(f64::infinity() > 1e308);
    }
}
