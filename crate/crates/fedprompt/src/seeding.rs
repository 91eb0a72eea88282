//! Derivation of independent, reproducible RNG streams.
//!
//! Every random draw in the simulator comes from a stream derived from the
//! master seed plus a purpose tag and context indices (client, round, epoch).
//! No generator state is ever carried across rounds, which is what makes
//! checkpoint-resume continue bit-exactly: a resumed run re-derives the same
//! streams the uninterrupted run would have used.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags spacing the derived streams apart.
pub mod tag {
    pub const ETF_SEMANTIC: u64 = 0x01;
    pub const ETF_DOMAIN: u64 = 0x02;
    pub const IMAGE_ENCODER: u64 = 0x03;
    pub const TEXT_ENCODER: u64 = 0x04;
    pub const TEXT_TABLE: u64 = 0x05;
    pub const PROMPT_INIT: u64 = 0x06;
    pub const TRANSFORM_INIT: u64 = 0x07;
    pub const SYNTH_DATA: u64 = 0x08;
    pub const SPLIT: u64 = 0x09;
    pub const PARTITION: u64 = 0x0a;
    pub const TRANSFORM_SHUFFLE: u64 = 0x0b;
    pub const PROMPT_SHUFFLE: u64 = 0x0c;
    pub const BOUND_SAMPLING: u64 = 0x0d;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with context tags into a single stream seed.
pub fn mix(seed: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    state
}

/// ChaCha8 stream for `(seed, tags)`.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, tags))
}
