//! Seed derivation so every random draw is a function of (seed, stream, index).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named RNG streams; keeps draws for different purposes independent.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const CLASSES: u64 = 2;
    pub const INIT: u64 = 3;
    pub const GMM: u64 = 4;
    pub const KMEANS: u64 = 5;
    pub const BATCH: u64 = 6;
    pub const AUGMENT: u64 = 7;
    pub const MASK: u64 = 8;
    pub const PROBE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

pub fn rng_for(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
