//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by a root seed plus a path of tags, so there is no global RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and an ordered list of tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t)))
}

/// A ChaCha8 generator for the substream identified by `(seed, tags)`.
pub fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

/// Stream tags used across the crate. Keeping them in one place avoids two
/// subsystems accidentally sharing a stream.
pub mod tags {
    pub const CENTERS: u64 = 1;
    pub const SAMPLES: u64 = 2;
    pub const TEST_SAMPLES: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const WEAK: u64 = 7;
    pub const STRONG: u64 = 8;
    pub const MIXUP: u64 = 9;
    pub const EVAL: u64 = 10;
    pub const WARMUP: u64 = 11;
}
