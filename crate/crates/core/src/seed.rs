//! Deterministic seed derivation.
//!
//! Every random stream in the crate is addressed by a master seed plus a short
//! path of integers (trajectory id, epoch, batch, ...). Streams for different
//! paths are independent of the order in which they are created, which keeps
//! dataset generation, training and evaluation bitwise reproducible.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

// stream tags
pub const TAG_SIMULATE: u64 = 0x5349_4d55;
pub const TAG_INIT: u64 = 0x494e_4954;
pub const TAG_SHUFFLE: u64 = 0x5348_5546;
pub const TAG_TRAIN: u64 = 0x5452_4149;
pub const TAG_VALIDATE: u64 = 0x5641_4c49;
pub const TAG_EVALUATE: u64 = 0x4556_414c;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
