//! Seed derivation and the initialisation distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of tags into an independent sub-seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags so that every consumer of randomness draws from its own
/// derived generator.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const INSTANCE_SAMPLER: u64 = 2;
    pub const BALANCED_SAMPLER: u64 = 3;
    pub const MIXUP: u64 = 4;
    pub const GCL_NOISE: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const SYNTH: u64 = 7;
    pub const SUBSAMPLE: u64 = 8;
}

/// Normal(0, std²) truncated to `±2·std` by rejection.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn truncated_normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = truncated_normal(rng, std);
    }
    t
}

/// Glorot-uniform matrix for a `fan_in × fan_out` projection.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}
