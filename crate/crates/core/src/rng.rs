//! Counter-based seed derivation.
//!
//! Every random draw in training (augmentation, shuffling, parameter
//! init) comes from a generator seeded by `derive(master, tags)`. A stream
//! is therefore identified by its tag path rather than by how many numbers
//! were drawn before it, which keeps results independent of worker count
//! and lets a checkpoint restore all randomness from the master seed plus
//! the epoch/step counters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// 64-bit seed derived from a master seed and a path of integer tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn derive(master: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(master, tags))
}

/// Stable 64-bit hash of a string, for tagging streams by name.
pub fn tag(name: &str) -> u64 {
    let out = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(out[..8].try_into().expect("sha256 has 32 bytes"))
}
