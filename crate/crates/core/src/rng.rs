//! Reproducible random streams.
//!
//! Every randomized routine takes an [`RngSeed`]: a `(seed, stream)` pair that
//! maps onto an independent ChaCha8 keystream. Child streams for parallel
//! trials are derived with [`RngSeed::substream`], so a trial's randomness
//! depends only on its index and never on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed {
    pub seed: u64,
    pub stream: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSeed {
    pub const fn new(seed: u64) -> Self {
        RngSeed { seed, stream: 0 }
    }

    pub const fn with_stream(seed: u64, stream: u64) -> Self {
        RngSeed { seed, stream }
    }

    /// Derive an independent child stream. Children of distinct parents or
    /// distinct indices never share a key.
    pub fn substream(&self, index: u64) -> RngSeed {
        RngSeed {
            seed: splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x5bd1_e995))),
            stream: index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

impl Default for RngSeed {
    fn default() -> Self {
        RngSeed::new(0)
    }
}
