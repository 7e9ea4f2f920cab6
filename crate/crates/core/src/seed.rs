//! Master-seed fan-out. Every consumer derives its own stream from the master
//! seed and a label, so adding a consumer never perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for `label` under `master`.
pub fn derive(master: u64, label: &str) -> u64 {
    splitmix(master ^ splitmix(fnv1a(label.as_bytes())))
}

/// Sub-seed for the `index`-th member of a labelled family.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix(derive(master, label) ^ splitmix(index.wrapping_add(1)))
}

pub fn rng(master: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, label))
}

pub fn rng_indexed(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_indexed(master, label, index))
}
