//! Seed derivation.
//!
//! All randomness comes from ChaCha8 streams whose seeds are derived from a
//! base seed and a path of integers with SplitMix64 mixing. A component that
//! needs its own stream (a clip, a fold, a training stage) gets
//! `stream(base, &[TAG, index, ...])`, so results never depend on scheduling
//! order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_GENERATOR: u64 = 0x67656e;
pub const TAG_LABELS: u64 = 0x6c626c;
pub const TAG_FOLDS: u64 = 0x666f6c64;
pub const TAG_STAGE1_SEG: u64 = 0x733173;
pub const TAG_STAGE1_IMG: u64 = 0x733169;
pub const TAG_STAGE3: u64 = 0x7333;
pub const TAG_FOLD_RUN: u64 = 0x66726e;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sub_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(base, path))
}
