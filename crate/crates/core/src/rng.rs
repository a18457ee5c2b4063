//! Named, seed-derived random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(seed, name, index)`, so adding draws to one stream never perturbs another.
//! Worker `i` samples its batches from `stream(seed, "worker", i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha12Rng;

pub fn stream(seed: u64, name: &str, index: u64) -> SeededRng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update((name.len() as u64).to_le_bytes())
        .chain_update(name.as_bytes())
        .chain_update(index.to_le_bytes())
        .finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    SeededRng::from_seed(key)
}
