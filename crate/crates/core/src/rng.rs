//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream selected by
//! `(seed, key)`, so results do not depend on the order in which work items
//! are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a labeled sub-seed, e.g. `sub_seed(global, "train")`.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    mix64(seed ^ mix64(h))
}

/// Random stream for work item `key` under `seed`.
pub fn stream(seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key);
    rng
}

/// Random stream for a two-part key such as `(trajectory, attempt)`.
pub fn stream2(seed: u64, key: u64, sub: u64) -> ChaCha8Rng {
    stream(mix64(seed ^ mix64(sub.wrapping_add(0x5851_F42D_4C95_7F2D))), key)
}
