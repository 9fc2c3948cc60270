//! Deterministic, platform-independent random streams.
//!
//! Every randomized component draws from a ChaCha stream keyed by the user
//! seed plus a purpose label, so independent components (parameter init,
//! splits, folds, benchmark cells) never share or reorder draws and results
//! reproduce bit-for-bit across runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream keyed by `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    substream(seed, label, 0)
}

/// Stream keyed by `(seed, label, index)`.
pub fn substream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update([0xfe]);
    hasher.update(label.as_bytes());
    hasher.update([0xff]);
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
