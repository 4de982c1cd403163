//! Deterministic RNG derivation so independent streams (epochs, splits,
//! per-image inference) never depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 stream keyed by `seed` and an ordered list of stream tags.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let key = tags.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)));
    ChaCha8Rng::seed_from_u64(key)
}

/// FNV-1a, used to turn string ids into stream tags.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
