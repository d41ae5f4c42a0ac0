//! Seed derivation. All randomness in a run flows from one experiment seed;
//! sub-streams are derived by hashing labelled keys so that the values do not
//! depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used everywhere: ChaCha with 8 rounds, seeded from a `u64`.
/// Its output stream is fixed by the algorithm and identical on every
/// platform.
pub type SimRng = ChaCha8Rng;

pub fn rng(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a sub-seed from a parent seed and a sequence of keys.
pub fn derive(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |acc, &k| mix64(acc ^ mix64(k)))
}

/// Derives a sub-seed from a parent seed and a textual label.
pub fn derive_label(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes, then mixed with the parent.
    let h = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x1000_0000_01b3));
    derive(seed, &[h])
}
