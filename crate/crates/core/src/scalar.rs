//! Floating-point abstraction so every kernel runs in 32-bit (training
//! default) or 64-bit (tight gradient-check tolerances).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Element type of all tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    /// Default step size for central finite differences at this precision.
    const GRAD_CHECK_EPS: f64;

    fn from_fp(v: f64) -> Self;
    fn to_fp(self) -> f64;

    fn sample_normal<R: Rng>(rng: &mut R) -> Self;
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self;
}

impl Scalar for f32 {
    const GRAD_CHECK_EPS: f64 = 1e-3;

    fn from_fp(v: f64) -> Self {
        v as f32
    }
    fn to_fp(self) -> f64 {
        self as f64
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        Uniform::new(lo as f32, hi as f32).sample(rng)
    }
}

impl Scalar for f64 {
    const GRAD_CHECK_EPS: f64 = 1e-5;

    fn from_fp(v: f64) -> Self {
        v
    }
    fn to_fp(self) -> f64 {
        self
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        Uniform::new(lo, hi).sample(rng)
    }
}
