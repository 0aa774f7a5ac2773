//! Seeded randomness streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// SplitMix64 finaliser; used to derive independent stream seeds from a
/// master seed and a tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, tag: u64) -> ChainRng {
    ChainRng::seed_from_u64(mix_seed(seed, tag))
}

pub fn seeded(seed: u64) -> ChainRng {
    ChainRng::seed_from_u64(seed)
}
