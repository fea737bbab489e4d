//! Seed derivation. Every random stream in the pipeline is a ChaCha8
//! generator keyed by `(seed, stream tag)`, so streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `seed ⊕ tag`-mixed input.
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

pub mod tags {
    pub const SYNTH: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const ALIGNED_INIT: u64 = 3;
    pub const INTRINSIC_INIT: u64 = 4;
    pub const CLASSIFIER_INIT: u64 = 5;
}
