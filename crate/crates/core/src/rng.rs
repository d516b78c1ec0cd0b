//! Seeded randomness.
//!
//! Every random draw in the engine comes from ChaCha8 (the 8-round ChaCha
//! stream cipher run in counter mode), keyed through `SeedableRng::seed_from_u64`.
//! Independent sub-streams are derived from the run seed with SplitMix64
//! mixing, so a query or purpose always sees the same stream no matter how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `tags` into `seed`, one SplitMix64 round per tag.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(seed, |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived(seed: u64, tags: &[u64]) -> Rng {
    seeded(derive(seed, tags))
}

/// Stable 64-bit tag for a string (FNV-1a).
pub fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
