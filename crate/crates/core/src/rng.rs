//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! parent seed and a stream index, so any component can be regenerated in
//! isolation and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from `(seed, index)` with a splitmix64 finaliser.
pub fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(seed, index))
}
