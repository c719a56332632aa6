//! Deterministic seed derivation.
//!
//! Every random stream in a run is derived from one root seed and a path of
//! stream labels, so sweep cells and pipeline stages draw independent yet
//! reproducible numbers regardless of execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Hash a textual stream label into a 64-bit counter.
pub fn label_id(label: &str) -> u64 {
    // FNV-1a; stable across platforms and releases.
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Derive a child seed from `root` along `path`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// A generator for the stream named `label` under `root`.
pub fn stream(root: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, &[label_id(label)]))
}

/// A generator for the indexed stream `label[index]` under `root`.
pub fn indexed_stream(root: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(root, &[label_id(label), index]))
}
