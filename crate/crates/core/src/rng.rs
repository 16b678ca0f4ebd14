//! Seeded RNG construction and Gaussian sampling helpers.
//!
//! Every stochastic component takes an explicit seed; derived streams keep
//! independent consumers (data sampling, noise grids, augmentation) from
//! perturbing each other's sequences.

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Arr;

pub fn seeded(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Independent stream for the same seed.
pub fn derived(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product::<usize>().max(1);
    let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), v).unwrap()
}

pub fn randn_vec(rng: &mut ChaCha12Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
