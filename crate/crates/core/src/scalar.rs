//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display, LowerExp};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real field the library computes in: `f64` for experiments, `f32` when
/// memory matters more than the last digits.
///
/// The associated tolerances scale with machine precision so that contracts
/// stated for `f64` (rows summing to one within `1e-12`, for instance) keep a
/// meaningful counterpart in single precision.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Display + LowerExp + Debug + Send + Sync + 'static
{
    /// Accepted deviation of a probability row from unit mass after normalization.
    fn stochastic_tol() -> Self;

    /// Largest deviation from unit mass that is silently renormalized.
    fn renormalize_tol() -> Self;

    /// Relative threshold under which a factor denominator counts as zero.
    fn degeneracy_tol() -> Self;

    /// Relative tolerance for symmetry checks on norm matrices.
    fn symmetry_tol() -> Self;

    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    fn stochastic_tol() -> Self {
        1e-12
    }
    fn renormalize_tol() -> Self {
        1e-9
    }
    fn degeneracy_tol() -> Self {
        1e-14
    }
    fn symmetry_tol() -> Self {
        1e-12
    }
}

impl Real for f32 {
    fn stochastic_tol() -> Self {
        1e-5
    }
    fn renormalize_tol() -> Self {
        1e-4
    }
    fn degeneracy_tol() -> Self {
        1e-6
    }
    fn symmetry_tol() -> Self {
        1e-5
    }
}
