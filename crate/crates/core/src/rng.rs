use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64 finalizer; mixes a seed and a stream tag into an independent
/// stream seed so derived generators do not depend on draw history.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tag: u64) -> u64 {
    mix(base ^ mix(tag))
}

pub fn rng_from(base: u64, tag: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, tag))
}

/// Stable stream tags so call sites cannot collide by accident.
pub mod stream {
    pub const BACKBONE_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const EPOCH_SHUFFLE: u64 = 3;
    pub const VAL_SPLIT: u64 = 4;
    pub const FOREST: u64 = 5;
    pub const BLOBS: u64 = 6;
    pub const SUBSAMPLE: u64 = 7;
}

/// Combine a stream tag with task/epoch style indices.
pub fn tagged(tag: u64, parts: &[u64]) -> u64 {
    let mut acc = mix(tag);
    for &p in parts {
        acc = mix(acc ^ p);
    }
    acc
}
