//! Seed management.
//!
//! Stage and item seeds are derived from a master seed by hashing, so any
//! stage or any single item can be regenerated without replaying the others:
//!
//! `derive_seed(seed, label) = u64::from_le_bytes(SHA-256(seed_le ‖ label)[..8])`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for an indexed sub-stream, e.g. (epoch, item) pairs.
pub fn derive_indexed(seed: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stage_rng(seed: u64, label: &str) -> StageRng {
    rng(derive_seed(seed, label))
}
