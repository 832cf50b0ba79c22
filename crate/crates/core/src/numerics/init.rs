//! Seeded parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::DenseArray;

/// Cut-off of the truncated normal, in standard deviations.
const TRUNCATION: f64 = 2.0;
/// Standard deviation of a unit normal truncated to ±2.
const TRUNCATED_UNIT_STD: f64 = 0.879_625_661_034_239_8;

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> DenseArray {
    DenseArray::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// Normal truncated at two standard deviations, rescaled so the population
/// standard deviation equals `std`.
pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> DenseArray {
    DenseArray::from_fn(shape.to_vec(), |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= TRUNCATION {
            break z * std / TRUNCATED_UNIT_STD;
        }
    })
}

/// Glorot uniform for a `fan_in × fan_out` weight matrix.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> DenseArray {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseArray::from_fn(vec![fan_in, fan_out], |_| rng.random_range(-bound..=bound))
}
