//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from one integer seed. Each
//! subsystem gets its own ChaCha stream so that adding draws in one place
//! never shifts the sequence seen by another.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::matrix::Matrix;

pub type StreamRng = ChaCha8Rng;

/// Stream ids. Values are part of the reproducibility contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Noise = 3,
    SynthSpeakers = 10,
    SynthSamples = 11,
    SynthShift = 12,
    SynthTrials = 13,
    Probe = 20,
}

pub fn stream(seed: u64, which: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}
