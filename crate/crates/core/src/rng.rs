//! Seed derivation for reproducible sub-streams.
//!
//! Every source of randomness in the pipeline (corpus docs, init, shuffling,
//! dropout, down-sampling) draws from a ChaCha stream keyed by the run seed
//! plus a fixed tag path. Deriving streams by position instead of sharing one
//! sequential RNG means resuming a run or parallelizing a loop cannot change
//! what any step sees.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the sub-stream identified by `tags` under `seed`.
pub fn derive(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    ChaCha8Rng::seed_from_u64(s)
}
