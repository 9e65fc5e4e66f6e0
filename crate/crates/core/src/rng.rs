//! Deterministic random streams.
//!
//! Every stochastic component draws from a [`DeeRng`] obtained through
//! [`seeded_rng`]. ChaCha8 is used because its output is specified
//! independently of platform and word size, so identical seeds give identical
//! streams everywhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type DeeRng = ChaCha8Rng;

/// Builds the deterministic stream for `seed`. Every seed, including 0, is valid.
pub fn seeded_rng(seed: u64) -> DeeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent child seed, e.g. one per sweep repeat or per purpose.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the combined words
    let mut x = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[inline]
pub fn standard_normal(rng: &mut DeeRng) -> f64 {
    StandardNormal.sample(rng)
}

#[inline]
pub fn uniform01(rng: &mut DeeRng) -> f64 {
    rng.random::<f64>()
}
