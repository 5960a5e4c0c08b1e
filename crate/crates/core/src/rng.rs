//! Deterministic random streams.
//!
//! A stream is addressed by `(master_seed, trial_index, tag)`. The master
//! seed keys a ChaCha8 generator and the pair `(trial_index, tag)` selects
//! one of its 2^64 independent streams, so every trial draws the same numbers
//! no matter which thread or in which order it runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamTag {
    Symbols = 0,
    Noise = 1,
    Target = 2,
    Weights = 3,
    Scene = 4,
    Optimizer = 5,
}

const TAG_BITS: u32 = 4;

pub fn stream(master_seed: u64, trial_index: u64, tag: StreamTag) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((trial_index << TAG_BITS) | tag as u64);
    rng
}
