//! Seed derivation. Every random stream in a run is a ChaCha8 generator keyed
//! by the run seed and a fixed per-purpose tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_DROPOUT: u64 = 2;
pub const TAG_BATCHES: u64 = 3;
pub const TAG_SPLIT: u64 = 4;
pub const TAG_DISCRIMINATOR: u64 = 5;
pub const TAG_DIVERSITY: u64 = 6;
pub const TAG_SOURCE: u64 = 7;
pub const TAG_TARGET: u64 = 8;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

pub fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

/// `seed ⊕ hash(value)`, used to decorrelate runs that differ in one real knob.
pub fn seed_for_value(seed: u64, value: f64) -> u64 {
    seed ^ splitmix64(value.to_bits())
}
