//! Seeded random streams.
//!
//! Every random draw in training and evaluation comes from a stream keyed by
//! `(seed, domain, index)`, so a run can be resumed at any step without
//! carrying generator state around.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags that keep the streams of different consumers disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Shuffle = 2,
    Step = 3,
    Codebook = 4,
    Reseed = 5,
    Generate = 6,
    Elbo = 7,
    Synth = 8,
    Split = 9,
    Eval = 10,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (domain as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
