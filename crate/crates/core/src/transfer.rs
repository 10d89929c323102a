//! A common interface over every way of moving target embeddings.

use alloc::format;
use core::fmt;
use core::str::FromStr;

use crate::baselines::{apply_coral, baseline_transfer, BaselineKind, CoralTransform, DomainStats};
use crate::cvae::EditnetModel;
use crate::data::prenormalize;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Maps raw target-domain embeddings to the space they are scored in.
pub trait EmbeddingTransfer {
    fn transfer(&self, x: &Matrix) -> Result<Matrix>;
}

/// No transfer.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl EmbeddingTransfer for Identity {
    fn transfer(&self, x: &Matrix) -> Result<Matrix> {
        Ok(x.clone())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StatsBaseline<'a> {
    pub kind: BaselineKind,
    pub tar: &'a DomainStats,
    pub src: &'a DomainStats,
}

impl EmbeddingTransfer for StatsBaseline<'_> {
    fn transfer(&self, x: &Matrix) -> Result<Matrix> {
        baseline_transfer(self.kind, x, self.tar, self.src)
    }
}

impl EmbeddingTransfer for CoralTransform {
    fn transfer(&self, x: &Matrix) -> Result<Matrix> {
        apply_coral(self, x)
    }
}

/// Eval-mode EDITnet transfer: optional target pre-normalization, then the
/// latent prior shift through the model.
#[derive(Clone, Copy, Debug)]
pub struct EditnetTransfer<'a> {
    pub model: &'a EditnetModel,
    /// `None` for models trained without pre-normalization.
    pub prenorm: Option<&'a DomainStats>,
}

impl EmbeddingTransfer for EditnetTransfer<'_> {
    fn transfer(&self, x: &Matrix) -> Result<Matrix> {
        match self.prenorm {
            Some(stats) => self.model.transfer(&prenormalize(x, stats)?),
            None => self.model.transfer(x),
        }
    }
}

/// Transfer methods selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    None,
    Editnet,
    Baseline(BaselineKind),
    Coral,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::None,
        Method::Editnet,
        Method::Baseline(BaselineKind::Center),
        Method::Baseline(BaselineKind::CenterShift),
        Method::Baseline(BaselineKind::Standardize),
        Method::Baseline(BaselineKind::StandardizeRecolor),
        Method::Coral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::None => "none",
            Method::Editnet => "editnet",
            Method::Baseline(k) => k.name(),
            Method::Coral => "coral",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown method `{s}`")))
    }
}
