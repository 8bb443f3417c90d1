//! Seeding conventions.
//!
//! All randomness comes from xoshiro256** whose 256-bit state is expanded
//! from a `u64` with SplitMix64. Independent streams (per dataset sample,
//! per model component) derive their seed with [`derive_seed`].

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Xoshiro;

/// One SplitMix64 output for state `x`.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under master seed `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

pub fn rng_for(seed: u64, index: u64) -> Xoshiro {
    Xoshiro::seed_from_u64(derive_seed(seed, index))
}

pub fn rng(seed: u64) -> Xoshiro {
    Xoshiro::seed_from_u64(seed)
}
