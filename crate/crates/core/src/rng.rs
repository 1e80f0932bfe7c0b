//! Named random streams derived from a single run seed.
//!
//! Every consumer of randomness draws from `(seed, stream, index)`, so a
//! component rerun in isolation sees the same numbers as inside a full run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Attack = 3,
    Data = 4,
    Check = 5,
}

/// Independent generator for `index` within a named stream. Each index owns
/// 2^36 words of keystream.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos((index as u128) << 36);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream_rng(7, Stream::Attack, 3).random();
        let b: u64 = stream_rng(7, Stream::Attack, 3).random();
        let c: u64 = stream_rng(7, Stream::Attack, 4).random();
        let d: u64 = stream_rng(7, Stream::Init, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
