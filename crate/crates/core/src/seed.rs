//! Seed splitting.
//!
//! Every random stream is derived from a root seed and a purpose label:
//! `derive_seed(root, label)` is the first eight bytes (little endian) of
//! `SHA-256(root.to_le_bytes() || label)`. Streams with different labels are
//! independent, and adding a new stream never perturbs existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// The random generator used throughout the crate.
pub type DecilRng = ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(root: u64, label: &str) -> DecilRng {
    DecilRng::seed_from_u64(derive_seed(root, label))
}
