//! Deterministic RNG stream derivation.
//!
//! Every random draw in training and evaluation comes from a stream keyed by
//! `(run seed, tags...)`, so any part of a run can be replayed in isolation:
//! reproducibility never depends on draw order across subsystems, and resuming
//! from a checkpoint re-derives exactly the streams an uninterrupted run would
//! have used.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche for cheap key mixing.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from a seed and a tag path.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x9e37_79b9)));
    }
    ChaCha8Rng::seed_from_u64(s)
}
