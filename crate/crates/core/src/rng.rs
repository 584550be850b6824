//! Seed derivation for reproducible random streams.
//!
//! Every consumer of randomness (a simulated path, an MCMC chain, a training
//! epoch) gets its own ChaCha stream keyed by a master seed plus a list of
//! integer tags. Streams never depend on execution order, so parallel and
//! sequential runs produce the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Tags separating the purposes that draw from the same master seed.
pub mod domain {
    pub const SIMULATE: u64 = 1;
    pub const CHAIN: u64 = 2;
    pub const TRAIN_INIT: u64 = 3;
    pub const TRAIN_SHUFFLE: u64 = 4;
    pub const DATASET: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash a master seed and a tag path into a derived 64-bit seed.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5DEE_CE66_D1CE_4E5B);
    for &tag in tags {
        h = splitmix64(h ^ splitmix64(tag.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    h
}

/// Independent generator for `(master, tags...)`.
pub fn stream(master: u64, tags: &[u64]) -> StreamRng {
    let derived = derive_seed(master, tags);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(derived.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
