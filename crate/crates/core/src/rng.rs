//! Keyed random streams.
//!
//! Every stream is a ChaCha8 generator seeded from the user seed and placed on
//! a stream id assembled from `(domain, major, minor)`, so any replicate can be
//! replayed on its own and results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains, one per consumer.
pub mod domain {
    pub const SHAPE_PROBABILITIES: u8 = 1;
    pub const SIMULATION: u8 = 2;
    pub const MOMENT_ORACLE: u8 = 3;
}

/// Stream for `(domain, major, minor)`; `major < 2^24`, `minor < 2^32`.
pub fn stream(seed: u64, domain: u8, major: u64, minor: u64) -> ChaCha8Rng {
    debug_assert!(major < 1 << 24 && minor < 1 << 32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) | ((major & 0xff_ffff) << 32) | (minor & 0xffff_ffff));
    rng
}
