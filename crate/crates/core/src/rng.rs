//! Seeded, splittable random streams.
//!
//! Every run owns one `LabRng`. Independent sub-streams (evaluation sets,
//! proxy runs, dataset draws) are derived from a `(seed, stream)` pair so
//! that adding a consumer never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named streams used across the crate.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATASET: u64 = 2;
    pub const MINIBATCH: u64 = 3;
    pub const EVAL: u64 = 4;
    pub const PROXY: u64 = 5;
    pub const CLUSTER: u64 = 6;
}
