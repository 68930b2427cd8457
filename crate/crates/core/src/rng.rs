//! Seed derivation. Every stochastic stage draws from its own ChaCha stream,
//! keyed by the run seed and a stage label, so stages never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    label
        .bytes()
        .fold(splitmix64(seed), |acc, b| splitmix64(acc ^ u64::from(b)))
}

pub fn derive_seed_n(seed: u64, label: &str, n: u64) -> u64 {
    splitmix64(derive_seed(seed, label) ^ splitmix64(n))
}

pub fn stage_rng(seed: u64, label: &str) -> StageRng {
    StageRng::seed_from_u64(derive_seed(seed, label))
}
