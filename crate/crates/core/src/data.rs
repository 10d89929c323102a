//! Embedding sets and per-domain pre-normalization.

use alloc::string::String;
use alloc::vec::Vec;

use crate::baselines::DomainStats;
use crate::cvae::DomainLabel;
use crate::error::{shape_err, Result};
use crate::matrix::Matrix;

pub type Domain = DomainLabel;

/// Embeddings with per-row utterance and speaker ids.
///
/// Several rows may share an utterance id (multiple segments of one
/// utterance). Speaker ids are carried for evaluation bookkeeping only;
/// training never reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub domain: Domain,
    pub embeddings: Matrix,
    pub utt_ids: Vec<String>,
    pub speaker_ids: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(
        domain: Domain,
        embeddings: Matrix,
        utt_ids: Vec<String>,
        speaker_ids: Vec<String>,
    ) -> Result<Self> {
        let n = embeddings.rows();
        if utt_ids.len() != n || speaker_ids.len() != n {
            return Err(shape_err!(
                "{n} embeddings with {} utterance ids and {} speaker ids",
                utt_ids.len(),
                speaker_ids.len()
            ));
        }
        embeddings.ensure_finite("embedding set")?;
        Ok(Self {
            domain,
            embeddings,
            utt_ids,
            speaker_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Same rows with new embeddings (e.g. after a transfer).
    pub fn with_embeddings(&self, embeddings: Matrix) -> Result<Self> {
        Self::new(
            self.domain,
            embeddings,
            self.utt_ids.clone(),
            self.speaker_ids.clone(),
        )
    }
}

/// `(x − mean) / std` per channel.
pub fn prenormalize(x: &Matrix, stats: &DomainStats) -> Result<Matrix> {
    if x.cols() != stats.dim() {
        return Err(shape_err!("stats of dim {} for {} columns", stats.dim(), x.cols()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
    }
    Ok(out)
}

/// Inverse of [`prenormalize`].
pub fn denormalize(x: &Matrix, stats: &DomainStats) -> Result<Matrix> {
    if x.cols() != stats.dim() {
        return Err(shape_err!("stats of dim {} for {} columns", stats.dim(), x.cols()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    Ok(out)
}

pub fn apply_prenorm(set: &EmbeddingSet, stats: &DomainStats) -> Result<EmbeddingSet> {
    set.with_embeddings(prenormalize(&set.embeddings, stats)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::compute_stats;
    use crate::rng::{normal_matrix, stream, Stream};
    use alloc::format;
    use alloc::vec;

    fn set(rows: usize, cols: usize, seed: u64) -> EmbeddingSet {
        let m = normal_matrix(rows, cols, &mut stream(seed, Stream::Probe)).map(|v| 3.0 * v - 1.0);
        let ids: Vec<String> = (0..rows).map(|i| format!("u{i}")).collect();
        EmbeddingSet::new(Domain::Target, m, ids.clone(), ids).unwrap()
    }

    #[test]
    fn prenorm_of_own_stats_is_standard() {
        let s = set(200, 5, 1);
        let stats = compute_stats(&s.embeddings).unwrap();
        let n = apply_prenorm(&s, &stats).unwrap();
        let again = compute_stats(&n.embeddings).unwrap();
        for c in 0..5 {
            assert!(again.mean[c].abs() < 1e-9);
            assert!((again.std[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_stats_and_inverse() {
        let s = set(10, 4, 2);
        let unit = DomainStats::new(vec![0.0; 4], vec![1.0; 4], 10).unwrap();
        assert_eq!(prenormalize(&s.embeddings, &unit).unwrap(), s.embeddings);
        let stats = compute_stats(&set(30, 4, 3).embeddings).unwrap();
        let back = denormalize(&prenormalize(&s.embeddings, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.data().iter().zip(s.embeddings.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        for r in 0..10 {
            for c in 0..4 {
                let want = (s.embeddings.get(r, c) - stats.mean[c]) / stats.std[c];
                assert_eq!(prenormalize(&s.embeddings, &stats).unwrap().get(r, c), want);
            }
        }
        assert!(prenormalize(&Matrix::zeros(1, 3), &stats).is_err());
    }

    #[test]
    fn set_validation() {
        assert!(EmbeddingSet::new(Domain::Source, Matrix::zeros(2, 3), vec![], vec![]).is_err());
        let empty = EmbeddingSet::new(Domain::Source, Matrix::zeros(0, 3), vec![], vec![]).unwrap();
        assert!(empty.is_empty());
    }
}
