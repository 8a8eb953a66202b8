//! Counter-based random streams.
//!
//! Every draw is addressed by `(root seed, stream id, draw index)`. Draws are
//! grouped in fixed-size chunks; each chunk owns a disjoint window of the
//! ChaCha keystream, so any chunk can be regenerated independently and in
//! parallel without changing a single bit of output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Number of draws sharing one keystream window.
pub const CHUNK: usize = 4096;

// 2^36 32-bit words per chunk; a draw never consumes more than a few dozen.
const CHUNK_WORD_SHIFT: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub root: u64,
    #[serde(default)]
    pub stream: u64,
}

impl SeedSpec {
    pub const fn new(root: u64, stream: u64) -> Self {
        SeedSpec { root, stream }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        SeedSpec { stream, ..self }
    }

    /// A root seed for an independent purpose (pool, evaluation batch, ...)
    /// that keeps the stream id.
    pub fn derive(self, tag: u64) -> Self {
        SeedSpec {
            root: splitmix64(self.root ^ splitmix64(tag.wrapping_add(0x5EED))),
            stream: self.stream,
        }
    }

    pub fn chunk_rng(&self, chunk: u64) -> ChaCha8Rng {
        debug_assert!(chunk < (1u64 << 32));
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(self.stream);
        rng.set_word_pos((chunk as u128) << CHUNK_WORD_SHIFT);
        rng
    }
}

impl Default for SeedSpec {
    fn default() -> Self {
        SeedSpec::new(0, 0)
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Chunk ranges `(chunk index, first draw offset inside chunk, draws)` covering
/// draws `start..start + count`.
pub(crate) fn chunk_spans(start: usize, count: usize) -> Vec<(u64, usize, usize)> {
    let mut out = Vec::new();
    if count == 0 {
        return out;
    }
    let end = start + count;
    let mut pos = start;
    while pos < end {
        let chunk = pos / CHUNK;
        let offset = pos % CHUNK;
        let take = (CHUNK - offset).min(end - pos);
        out.push((chunk as u64, offset, take));
        pos += take;
    }
    out
}
