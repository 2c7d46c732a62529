//! Scalar abstraction so the numeric core runs in either `f32` or `f64`.

use rand::Rng;
use rand_distr::StandardNormal;

/// Floating-point scalar the engine is generic over.
///
/// Everything numeric (vectors, trajectories, the network, the solvers)
/// is written against this trait and instantiated at `f32` or `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    /// Widen to `f64` (lossless for both supported scalars).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw from `U[lo, hi)`.
    fn uniform<R: Rng + ?Sized>(lo: Self, hi: Self, rng: &mut R) -> Self;

    /// One draw from `U[0, 1)`.
    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

/// Shorthand cast from `f64` used throughout the numeric core.
#[inline]
pub fn s<S: Scalar>(v: f64) -> S {
    S::from_f64(v).expect("f64 representable in scalar type")
}

impl Scalar for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform<R: Rng + ?Sized>(lo: Self, hi: Self, rng: &mut R) -> Self {
        rng.random_range(lo..hi)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}

impl Scalar for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(StandardNormal)
    }

    fn uniform<R: Rng + ?Sized>(lo: Self, hi: Self, rng: &mut R) -> Self {
        rng.random_range(lo..hi)
    }

    fn unit_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random()
    }
}
