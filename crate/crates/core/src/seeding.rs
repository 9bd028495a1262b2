//! Seed derivation. Every random stream in a run is a pure function of the
//! master seed and a path of integer tags, so runs replay bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`. Distinct tag paths give unrelated seeds.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| {
        splitmix64(acc.rotate_left(17) ^ splitmix64(t ^ 0xD1B5_4A32_D192_ED03))
    })
}

pub fn rng_from(base: u64, tags: &[u64]) -> RunRng {
    RunRng::seed_from_u64(derive_seed(base, tags))
}
