//! Counter-based seed derivation.
//!
//! Every stochastic operation receives its own seed, derived from the run's
//! master seed and a path of integers (stage, generation, member, ...). The
//! derived value depends only on the path, never on evaluation order, so
//! parallel evaluation stays reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stage identifiers used as the first path element.
pub mod stream {
    pub const GROUP_INIT: u64 = 1;
    pub const GROUP_EVOLUTION: u64 = 2;
    pub const MODEL_EVOLUTION: u64 = 3;
    pub const FINAL_TRAINING: u64 = 4;
    pub const FINE_TUNE: u64 = 5;
    pub const BASELINE: u64 = 6;
}

#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of counters.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |h, &p| {
        splitmix64(h ^ splitmix64(p.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
