//! Deterministic, splittable random streams.
//!
//! A [`RandomStream`] is a ChaCha8 key (the seed) plus a ChaCha stream id.
//! Parallel work is cut into fixed-size blocks; block `k` reads the keystream
//! from word `k << BLOCK_SHIFT`, so the draws a block sees depend only on
//! `(seed, stream_id, k)` and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const BLOCK_SHIFT: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomStream {
    pub seed: u64,
    #[serde(default)]
    pub stream_id: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Generator positioned at the start of the stream.
    pub fn rng(&self) -> ChaCha8Rng {
        self.block_rng(0)
    }

    /// Generator for block `block`, disjoint from every other block.
    pub fn block_rng(&self, block: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng.set_word_pos((block as u128) << BLOCK_SHIFT);
        rng
    }

    /// A derived stream, for handing independent streams to sub-tasks.
    pub fn substream(&self, index: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: self
                .stream_id
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index.wrapping_add(1)),
        }
    }
}
