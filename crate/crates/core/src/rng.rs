//! Reproducible, splittable random streams.
//!
//! A stream is identified by `(master_seed, stream_index)`. The pair is fed
//! to ChaCha12 as key and stream id, so distinct indices give independent
//! sequences and every draw is reproducible without any shared state.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Handle to one reproducible random sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// Child stream `child` of this stream.
    ///
    /// The child's master seed is a hash of the parent pair, and its index is
    /// `child`, so Monte Carlo trial `t` of a parent stream is always
    /// `parent.split(t)` no matter which thread runs it.
    pub fn split(&self, child: u64) -> RngStream {
        let key = splitmix64(self.master_seed ^ splitmix64(self.stream_index));
        RngStream::new(key, child)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
