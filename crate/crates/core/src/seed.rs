//! Seed derivation shared by every randomized step.
//!
//! Each random stream is seeded from `mix(mix(master, stream), index)` where
//! `mix` is the SplitMix64 finalizer applied to `seed + (index + 1) * φ64`.
//! A unit of work therefore sees the same random numbers whatever the order
//! or thread it runs on.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 output function (Steele, Lea & Flood).
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, index: u64) -> u64 {
    splitmix64(seed.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)))
}

/// Independent random streams drawn from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    OuterSplits = 1,
    InnerFolds = 2,
    Forest = 3,
    Balance = 4,
    LearningCurve = 5,
    Synthetic = 6,
}

pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    mix(mix(master, stream as u64), index)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
