//! Seed derivation.
//!
//! Every random stream in the pipeline is keyed by `(root seed, purpose, index)`.
//! The three parts are folded through SplitMix64 so that toggling one consumer
//! (say, CDAE corruption) never shifts the draws seen by another (negative
//! sampling). `index` is the epoch for per-epoch streams and zero otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The consumer a random stream is reserved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Split,
    Init,
    Negatives,
    Shuffle,
    Corruption,
    Synth,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Split => 0x5350_4c49_5400_0001,
            Purpose::Init => 0x494e_4954_0000_0002,
            Purpose::Negatives => 0x4e45_4741_5449_0003,
            Purpose::Shuffle => 0x5348_5546_464c_0004,
            Purpose::Corruption => 0x434f_5252_5550_0005,
            Purpose::Synth => 0x5359_4e54_4800_0006,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix(splitmix(splitmix(root) ^ tag) ^ index)`.
pub fn derive_seed(root: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(root) ^ purpose.tag()) ^ index)
}

pub fn rng_for(root: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, purpose, index))
}
