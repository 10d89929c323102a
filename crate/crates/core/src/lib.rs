//! Embedding domain transfer with a conditional VAE.
//!
//! The crate maps speaker embeddings from a target domain into a source
//! domain without speaker labels. It contains everything that is pure
//! computation: a small dense network substrate with exact gradients, the
//! conditional VAE and its losses, the training loop, statistics-based
//! transfer baselines (mean/std variants and CORAL), verification scoring
//! with EER, and a synthetic two-domain benchmark generator.
//!
//! File formats and the command-line front end live in the `editnet` crate.

#![no_std]
#![allow(clippy::needless_range_loop)]

extern crate alloc;

pub mod baselines;
pub mod cvae;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod synth;
pub mod train;
pub mod transfer;

pub use baselines::{BaselineKind, CoralTransform, DomainStats, Ridge};
pub use cvae::{DomainLabel, EditnetModel, LatentBatch, ModelDims};
pub use data::{Domain, EmbeddingSet};
pub use error::{Error, Result};
pub use eval::{EvalReport, SameDiff, Trial, TrialList};
pub use losses::LossBreakdown;
pub use matrix::Matrix;
pub use nn::{Activation, BatchNorm, Linear, Mode};
pub use synth::{DomainShift, SynthData, SynthSpec};
pub use train::{TrainConfig, TrainError, TrainOutcome, Variant};
pub use transfer::{EmbeddingTransfer, Method};
