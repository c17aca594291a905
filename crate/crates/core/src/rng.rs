//! Named, counter-addressed random streams derived from one master seed.
//!
//! Every consumer asks for `(stream, index)`; the resulting generator depends
//! only on the master seed and that pair, so results do not depend on the
//! order or thread in which streams are created.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Dropout = 2,
    Jitter = 3,
    Data = 4,
    Shuffle = 5,
    Proposals = 6,
    Test = 7,
}

pub fn stream(master_seed: u64, kind: Stream, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    // 8 bits of stream kind, 56 bits of per-kind counter.
    rng.set_stream(((kind as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}
