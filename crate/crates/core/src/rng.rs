//! Deterministic RNG streams keyed by a base seed and a label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Independent stream for `(seed, label)`; the same pair always yields the
/// same sequence regardless of what else has been drawn.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Child seed for handing to APIs that take a plain `u64`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    stream(seed, label).gen()
}
