//! Seeded random streams.
//!
//! Every consumer of randomness derives its own stream from the run seed and
//! a tuple of tags, so results never depend on call order across sessions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_BATCH: u64 = 2;
pub const STREAM_DP_SGD: u64 = 3;
pub const STREAM_LAPLACE: u64 = 4;
pub const STREAM_DP_FL: u64 = 5;
pub const STREAM_PARTITION: u64 = 6;
pub const STREAM_DATA: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x51_7cc1_b727_220a))))
}

pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
