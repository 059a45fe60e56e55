//! Named random streams.
//!
//! Every consumer draws from its own ChaCha stream keyed by the run seed, so
//! the values one subsystem sees do not depend on how many draws another made.
//! ChaCha is counter based; a stream's state is just its word position, which
//! is what checkpoints store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    DataOrder = 2,
    Interpolation = 3,
    Noise = 4,
    Crop = 5,
    Synthetic = 6,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn position(rng: &ChaCha8Rng) -> u128 {
    rng.get_word_pos()
}

pub fn restore(seed: u64, which: Stream, word_pos: u128) -> ChaCha8Rng {
    let mut rng = stream(seed, which);
    rng.set_word_pos(word_pos);
    rng
}
