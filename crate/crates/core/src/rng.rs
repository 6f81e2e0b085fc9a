//! Seeded random streams.
//!
//! Every stochastic draw in training and sampling comes from a stream keyed by
//! `(seed, purpose, indices...)`, so results never depend on call order across
//! examples and a run can be resumed from nothing more than `(seed, step)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different draws disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    Epoch = 3,
    RgbNoise = 4,
    Dequant = 5,
    Jitter = 6,
    Direction = 7,
    CondDrop = 8,
    Dropout = 9,
    Flip = 10,
    Sample = 11,
    Eval = 12,
    Labels = 13,
    Synth = 14,
    Check = 15,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn stream_seed(seed: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(purpose as u64));
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, purpose, indices))
}
