//! Seed derivation. Every random draw in training is keyed by
//! `(run seed, epoch, sample index, view tag)`, so results do not depend on
//! the order in which samples are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Which random stream a derived seed feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum ViewTag {
    Weak = 1,
    Strong = 2,
    Mask = 3,
    Shuffle = 4,
    Init = 5,
    Fixture = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a sequence of keys into a new 64-bit seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn sample_seed(base: u64, epoch: u64, index: u64, tag: ViewTag) -> u64 {
    derive_seed(base, &[epoch, index, tag as u64])
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
