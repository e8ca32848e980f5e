//! Deterministic RNG streams keyed by a seed and a path of integer tags.
//!
//! Work items (examples, epochs, batches) each get their own stream so that
//! results do not depend on the order or the number of workers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for the stream identified by `seed` and `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> StreamRng {
    let mut key = splitmix64(seed);
    for &t in tags {
        key = splitmix64(key ^ splitmix64(t.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(key)
}
