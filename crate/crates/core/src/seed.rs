//! Deterministic derivation of independent RNG streams from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a textual purpose tag and an index.
pub fn derive(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag, index))
}
