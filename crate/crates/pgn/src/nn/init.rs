//! Seeded parameter initialization.
//!
//! Sampling is always performed in `f64` and then cast, so an `f32` and an
//! `f64` network built from the same seed share the same parameter values.

use super::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// He-normal initialization: `std = sqrt(2 / fan_in)` where `fan_in` is the
/// product of all dimensions after the first.
pub fn he_normal<F: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64c(dist.sample(rng)))
}

/// Uniform values in `[lo, hi)`, seeded.
pub fn uniform<F: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64c(rng.gen_range(lo..hi)))
}

/// Standard-normal values scaled by `std`, seeded.
pub fn normal<F: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<F> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || F::from_f64c(dist.sample(rng)))
}
