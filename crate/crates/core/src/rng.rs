//! Seeded, platform-independent randomness.
//!
//! Every random draw in the crate goes through ChaCha8 seeded with
//! `seed_from_u64`; the algorithm name is recorded in plans and reports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRNG_NAME: &str = "chacha8";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer; derives independent per-batch seeds.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw from the open interval (0, 1).
pub fn open_unit<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

/// Moves a uniform random `z`-subset of `items` into its first `z` slots
/// (partial Fisher–Yates). Works from any starting arrangement.
pub fn shuffle_prefix<T, R: Rng>(items: &mut [T], z: usize, rng: &mut R) {
    let len = items.len();
    for i in 0..z.min(len) {
        let j = rng.gen_range(i..len);
        items.swap(i, j);
    }
}
