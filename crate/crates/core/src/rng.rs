//! Seeded random streams.
//!
//! Every stochastic component draws from a [`ChaCha8Rng`] derived from one
//! global seed and a stream name, so that generation, training and
//! evaluation can be re-seeded independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, used only to turn stream names into stream ids.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Named sub-stream of the global seed.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Rng for a single generated item (one view, one trial).
pub fn item(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}
