//! Seed plumbing. Every random draw in the crate goes through a ChaCha
//! generator whose seed is derived from one user-facing seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic sub-seed for an independent stream (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Named streams so call sites never collide.
pub mod stream {
    pub const GENERATOR_INIT: u64 = 1;
    pub const CRITIC_INIT: u64 = 2;
    pub const TRAIN_BATCHES: u64 = 3;
    pub const VALIDATION: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const PAIRS: u64 = 6;
    pub const EVAL_PERTURB: u64 = 7;
}
