//! Seed derivation for reproducible fan-out.
//!
//! Every stochastic step draws from a `ChaCha8Rng` seeded by mixing a base
//! seed with a tuple of tags (day index, draw index, purpose). The result
//! does not depend on evaluation order, so parallel runs match serial ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `base` with `tags` into a new 64-bit seed.
pub fn derive(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(base: u64, tags: &[u64]) -> SimRng {
    rng(derive(base, tags))
}

/// Purpose tags, so different consumers of one base seed never collide.
pub mod tag {
    pub const TARGET: u64 = 0x7461_7267;
    pub const REPLAY: u64 = 0x7265_706c;
    pub const FLOOR: u64 = 0x666c_6f6f;
    pub const SURROGATE_DATA: u64 = 0x7375_7267;
    pub const RANDSEARCH: u64 = 0x7261_6e64;
    pub const BAYESOPT: u64 = 0x6261_7965;
    pub const TRAIN: u64 = 0x7472_6169;
    pub const INIT: u64 = 0x696e_6974;
    pub const BENCH: u64 = 0x6265_6e63;
    pub const TRIPLET: u64 = 0x7472_6970;
}
