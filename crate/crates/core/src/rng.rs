//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keeping the purposes of derived seeds apart.
pub mod stream {
    pub const PARAMS: u64 = 1;
    pub const ENV_CONTAINER: u64 = 2;
    pub const ENV_POLICY: u64 = 3;
    pub const REPLAY: u64 = 4;
    pub const TUNING: u64 = 5;
    pub const EVAL: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream tag and an index.
pub fn derive_seed(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ tag.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    seeded_rng(derive_seed(master, tag, index))
}
