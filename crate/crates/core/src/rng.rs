//! Seed derivation.
//!
//! Every random stream in a run is derived from one root seed and a textual
//! label (for example `"shuffle/epoch0"`), so adding a new stage never
//! perturbs the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `root` and `label`.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, label: &str) -> Rng {
    rng_from_seed(derive_seed(root, label))
}
