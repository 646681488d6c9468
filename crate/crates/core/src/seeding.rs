//! Deterministic seed derivation. Every sample, problem, and epoch gets its
//! own generator derived from a master seed, so results do not depend on the
//! order or thread in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream`, item `index` under `master`.
pub fn derive(master: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod streams {
    pub const BVP_SAMPLE: u64 = 1;
    pub const NEWTON_PROBLEM: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const INIT: u64 = 5;
}
