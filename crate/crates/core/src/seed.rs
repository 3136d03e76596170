//! Deterministic derivation of independent RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` under base seed `base`.
pub fn derive(base: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(base) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng(base: u64, stream: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream))
}
