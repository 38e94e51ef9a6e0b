//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::tensor::Tensor;

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`, shaped `[fan_in, fan_out]`.
pub fn xavier_uniform<F: Real>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| F::lit(rng.gen_range(-bound..bound)))
}

pub fn normal<F: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<F> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

pub fn zeros<F: Real>(shape: &[usize]) -> Tensor<F> {
    Tensor::zeros(shape)
}

pub fn ones<F: Real>(shape: &[usize]) -> Tensor<F> {
    Tensor::filled(shape, F::one())
}
