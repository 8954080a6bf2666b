//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) seeded
//! with `seed_from_u64`; normal draws use `rand_distr::StandardNormal`.
//! Results are bit-reproducible for a given seed and dependency lock.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Tensor of i.i.d. `N(0, std^2)` draws.
pub fn normal_tensor<S: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<S>> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::of(z * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
