//! File formats, checkpoints and the command-line front end for
//! [`editnet_core`].
//!
//! * [`edbf`]: binary embedding files.
//! * [`checkpoint`]: sectioned, checksummed container holding a trained
//!   model, its config, both domains' statistics and optionally CORAL.
//! * [`kv`]: `key = value` configs.
//! * [`text`]: trial lists, score files, EER reports and training logs.
//! * [`cli`]: the `editnet` binary.

pub mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod edbf;
pub mod error;
pub mod kv;
pub mod pipeline;
pub mod text;

pub use checkpoint::{Checkpoint, Container};
pub use error::{Error, Result};
