//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from an explicit root seed plus a purpose tag, so streams never
//! depend on each other's consumption.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a root seed and a sequence of tags.
pub fn derive(root: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(root), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(root: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(root, tags))
}

/// Stable 64-bit tag for a string label (FNV-1a).
pub fn tag(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
