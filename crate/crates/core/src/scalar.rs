//! Scalar abstraction shared by the deterministic math (rates, fits, LP, ODE).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::Serialize;

/// Floating point type the planning math is generic over: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + Serialize
    + 'static
{
    /// Pivot / zero tolerance used by the simplex and feasibility checks.
    fn pivot_tol() -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f64 {
    fn pivot_tol() -> Self {
        1e-9
    }
}

impl Scalar for f32 {
    fn pivot_tol() -> Self {
        1e-5
    }
}

/// `a / b`, or `0` when `b` is zero (the `0/0 := 0` convention).
#[inline]
pub fn ratio_or_zero<T: Scalar>(a: T, b: T) -> T {
    if b == T::zero() {
        T::zero()
    } else {
        a / b
    }
}
