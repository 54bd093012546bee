//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from ChaCha20 seeded with
//! `seed_from_u64(seed)` and switched to a fixed stream number per purpose, so
//! parameter init, data generation, shuffling and masking never share draws.
//! ChaCha20 output is fully specified, so datasets and runs reproduce across
//! platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Generate = 2,
    Split = 3,
    Shuffle = 4,
    Mask = 5,
    LessForward = 6,
    GradCheck = 7,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
