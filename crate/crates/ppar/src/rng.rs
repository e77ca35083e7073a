//! Deterministic RNG derivation.
//!
//! Every random draw in the toolkit flows from a `ChaCha20` stream whose seed
//! is hashed from `(base seed, purpose tag, index)`. Streams are therefore
//! independent of each other and of iteration order, which is what makes
//! checkpoint resume and rerun determinism exact.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Hash length-prefixed parts into a 32-byte RNG seed.
pub fn seed_from_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Stream for `(seed, tag, index)`, e.g. `("geom", image 17)`.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(seed_from_parts(&[
        &seed.to_le_bytes(),
        tag.as_bytes(),
        &index.to_le_bytes(),
    ]))
}
