//! Seeded random streams. Every random decision in a run derives from the
//! run seed plus a fixed stream number, so independent consumers never
//! perturb each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_INIT: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_BUFFER: u64 = 4;
pub const STREAM_RFF: u64 = 5;
pub const STREAM_DATA: u64 = 6;
pub const STREAM_SEARCH: u64 = 7;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream keyed by two integers, e.g. (purpose, domain index).
pub fn substream(seed: u64, stream: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream);
    rng
}
