//! Named random streams derived from one 64-bit seed.
//!
//! Each consumer asks for a stream by purpose string; the stream seed is the
//! global seed mixed with a stable hash of that string, so adding a new
//! consumer never shifts the draws of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a over the purpose bytes, so stream ids are stable across builds.
pub fn stream_id(purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub global: u64,
}

impl Seeds {
    pub fn new(global: u64) -> Self {
        Self { global }
    }

    pub fn seed_for(&self, purpose: &str) -> u64 {
        mix(self.global ^ stream_id(purpose))
    }

    pub fn rng(&self, purpose: &str) -> StreamRng {
        StreamRng::seed_from_u64(self.seed_for(purpose))
    }
}
