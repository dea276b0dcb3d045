//! Seed derivation. Every random stream is a ChaCha8 generator keyed by a
//! root seed plus a stream tag and an index, so per-image or per-run work can
//! be split across workers without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type DetRng = ChaCha8Rng;

/// Stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TRAIN_IMAGES: u64 = 2;
    pub const TEST_IMAGES: u64 = 3;
    pub const EPISODE: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const PRETRAIN: u64 = 7;
    pub const FINETUNE: u64 = 8;
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, stream: u64, index: u64) -> u64 {
    mix(mix(root ^ mix(stream)) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(root: u64, stream: u64, index: u64) -> DetRng {
    DetRng::seed_from_u64(derive_seed(root, stream, index))
}
