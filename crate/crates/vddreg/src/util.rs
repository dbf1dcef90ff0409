//! Seed derivation and small shared helpers.
//!
//! All randomness in the crate flows from a single root seed, split per
//! component by hashing the component name into an independent stream. Two
//! components never share a stream, so each is reproducible in isolation.

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a deterministic, component-scoped RNG from the root seed.
pub fn rng_for(root_seed: u64, component: &str) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut hasher = Sha256::new();
    hasher.update(root_seed.to_le_bytes());
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Hard Dice overlap of two binary masks: 2|A∩B| / (|A|+|B|); 0 when both
/// masks are empty.
pub fn hard_dice(a: &crate::core::BinaryMask, b: &crate::core::BinaryMask) -> f64 {
    assert_eq!(a.values().dim(), b.values().dim(), "hard_dice dims");
    let inter: usize = a
        .values()
        .iter()
        .zip(b.values().iter())
        .filter(|(&x, &y)| x == 1 && y == 1)
        .count();
    let total = a.count_ones() + b.count_ones();
    if total == 0 {
        0.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
