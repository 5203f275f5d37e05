//! Seed derivation for reproducible, per-item random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of integers (image id, role, ...).
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(master), |acc, p| splitmix(acc ^ splitmix(*p)))
}

/// A ChaCha stream keyed by `derive_seed(master, parts)`.
pub fn rng_for(master: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

/// Stream tags so that independent consumers of one master seed never share a stream.
pub(crate) mod stream {
    pub const CORPUS: u64 = 1;
    pub const DIFFICULTY: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const NOISE_BKG: u64 = 4;
    pub const DETECT: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const INIT: u64 = 7;
}
