//! Seeded random streams. Every consumer of randomness draws from its own
//! ChaCha stream of the run seed, so e.g. the head initialization is the same
//! whether the backbone comes from scratch, a checkpoint, or a zoo.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Backbone = 0,
    Head = 1,
    Gates = 2,
    DataOrder = 3,
    Synthesis = 4,
    Split = 5,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
