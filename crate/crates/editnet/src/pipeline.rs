//! Glue between loaded sets, checkpoints and the transfer methods.

use editnet_core::baselines::{fit_coral, Ridge};
use editnet_core::train::{train_pipeline, TrainLogRecord};
use editnet_core::transfer::{EditnetTransfer, Identity, StatsBaseline};
use editnet_core::{EmbeddingSet, EmbeddingTransfer, Method, TrainConfig};

use crate::checkpoint::{Checkpoint, CORAL};
use crate::error::{Error, Result};

/// Trains on the embeddings of both sets (ids are never looked at) and
/// optionally fits CORAL on the same raw embeddings.
pub fn fit_checkpoint(
    tar: &EmbeddingSet,
    src: &EmbeddingSet,
    config: &TrainConfig,
    with_coral: bool,
    on_step: impl FnMut(&TrainLogRecord),
) -> Result<(Checkpoint, Vec<TrainLogRecord>)> {
    let p = train_pipeline(&tar.embeddings, &src.embeddings, config, on_step)?;
    let coral = if with_coral {
        Some(fit_coral(&tar.embeddings, &src.embeddings, Ridge::Auto)?)
    } else {
        None
    };
    let ck = Checkpoint {
        config: p.config,
        model: p.model,
        tar_stats: p.tar_stats,
        src_stats: p.src_stats,
        coral,
    };
    Ok((ck, p.log))
}

pub fn transfer_for(ck: &Checkpoint, method: Method) -> Result<Box<dyn EmbeddingTransfer + '_>> {
    Ok(match method {
        Method::None => Box::new(Identity),
        Method::Editnet => Box::new(EditnetTransfer {
            model: &ck.model,
            prenorm: ck.config.variant.prenorm().then_some(&ck.tar_stats),
        }),
        Method::Baseline(kind) => Box::new(StatsBaseline {
            kind,
            tar: &ck.tar_stats,
            src: &ck.src_stats,
        }),
        Method::Coral => Box::new(ck.coral.clone().ok_or_else(|| Error::MissingSection(CORAL.into()))?),
    })
}
