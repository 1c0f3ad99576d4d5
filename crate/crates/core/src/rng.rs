//! Seed derivation.
//!
//! Every experiment carries one named seed. Sub-streams (per episode, per
//! repeat, per evaluation checkpoint) are derived from it by counter
//! splitting, so a batch generated in parallel is identical to the same batch
//! generated serially.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `seed` and a purpose tag.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Tag constants keep derived streams for different purposes disjoint.
pub mod tags {
    pub const EPISODES: u64 = 1;
    pub const SADDLE: u64 = 2;
    pub const ROLLOUT: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const REPEAT: u64 = 5;
    pub const SMOOTHNESS: u64 = 6;
    pub const ASCENT: u64 = 7;
    pub const MODEL: u64 = 8;
    pub const MULTISTART: u64 = 9;
}

/// Stream `index` of the generator family rooted at `seed`.
pub fn stream(seed: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
