//! Seeding helpers.
//!
//! All randomness flows from explicit u64 seeds through ChaCha8, so runs are
//! reproducible across platforms. Per-item seeds (one per series, per epoch,
//! ...) are derived from a master seed with splitmix64 so that items stay
//! independent of iteration order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// splitmix64 step; finalizes `seed + index` into a well-mixed u64.
pub fn splitmix64(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic stream for the given seed.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for item `index` under a master seed.
pub fn rng_for_item(master: u64, index: u64) -> ChaCha8Rng {
    rng_from_seed(splitmix64(master, index))
}
