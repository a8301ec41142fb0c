//! Seeded random streams.
//!
//! A single master seed fans out into independent ChaCha streams, one per
//! purpose. Changing how often one consumer draws (for example a different
//! exploration schedule) never shifts the channel realisations another
//! consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Channel = 1,
    Arrivals = 2,
    Exploration = 3,
    Replay = 4,
    Init = 5,
    Policy = 6,
    Evaluation = 7,
    EvaluationArrivals = 8,
}

/// Returns the stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
