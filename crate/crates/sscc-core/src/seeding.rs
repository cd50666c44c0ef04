//! Seed derivation.
//!
//! All randomness in the crate flows from a single base seed. Sub-streams
//! (per epoch, per sample, per view) are derived by mixing the base seed with
//! stream tags through splitmix64, so parallel or out-of-order consumption of
//! sub-streams cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; bijective on u64.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives a child seed from a base seed and a list of stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ tag.wrapping_mul(0xa24b_aed4_963e_e407));
    }
    state
}

/// A deterministic generator for the given base seed and stream tags.
pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}
