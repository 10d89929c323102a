//! Verification scoring and equal error rate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::EmbeddingSet;
use crate::error::{shape_err, Error, Result};
use crate::losses::cosine;
use crate::matrix::Matrix;
use crate::transfer::EmbeddingTransfer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SameDiff {
    Same,
    Different,
}

impl SameDiff {
    pub fn is_same(self) -> bool {
        self == SameDiff::Same
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: SameDiff,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Self {
        Self { trials }
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn labels(&self) -> Vec<SameDiff> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn count(&self, label: SameDiff) -> usize {
        self.trials.iter().filter(|t| t.label == label).count()
    }
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b)
}

/// Mean cosine over every (enroll row, test row) pair.
pub fn trial_score(enroll: &Matrix, test: &Matrix) -> Result<f64> {
    if enroll.rows() == 0 || test.rows() == 0 {
        return Err(Error::Invalid("trial side without embeddings".into()));
    }
    if enroll.cols() != test.cols() {
        return Err(shape_err!("trial sides of dim {} and {}", enroll.cols(), test.cols()));
    }
    let mut acc = 0.0;
    for e in enroll.row_iter() {
        for t in test.row_iter() {
            acc += cosine_score(e, t)?;
        }
    }
    Ok(acc / (enroll.rows() * test.rows()) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate by threshold sweep.
///
/// At threshold `t`, `FAR(t) = P(score ≥ t | different)` and
/// `FRR(t) = P(score < t | same)`. Thresholds run over the sorted unique
/// scores plus a final point above every score (FAR 0, FRR 1). The result is
/// the linear interpolation between the two adjacent thresholds where
/// `FAR − FRR` changes sign.
pub fn compute_eer(scores: &[f64], labels: &[SameDiff]) -> Result<Eer> {
    if scores.len() != labels.len() {
        return Err(shape_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let n_same = labels.iter().filter(|l| l.is_same()).count();
    let n_diff = labels.len() - n_same;
    if n_same == 0 || n_diff == 0 {
        return Err(Error::SingleClass);
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, l)| (s, l.is_same()))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // (threshold, far, frr), ascending in threshold
    let mut points: Vec<(f64, f64, f64)> = Vec::new();
    let (mut same_below, mut diff_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let t = pairs[i].0;
        let far = (n_diff - diff_below) as f64 / n_diff as f64;
        let frr = same_below as f64 / n_same as f64;
        points.push((t, far, frr));
        while i < pairs.len() && pairs[i].0 == t {
            if pairs[i].1 {
                same_below += 1;
            } else {
                diff_below += 1;
            }
            i += 1;
        }
    }
    let last = points.last().map(|p| p.0).unwrap_or(0.0);
    points.push((last, 0.0, 1.0));

    for k in 0..points.len() {
        let (t, far, frr) = points[k];
        let d = far - frr;
        if d == 0.0 {
            return Ok(Eer { eer: far, threshold: t });
        }
        if d < 0.0 {
            // points[0] has FAR 1 and FRR 0, so k ≥ 1 here
            let (t0, far0, frr0) = points[k - 1];
            let d0 = far0 - frr0;
            let w = d0 / (d0 - d);
            return Ok(Eer {
                eer: far0 + w * (far - far0),
                threshold: t0 + w * (t - t0),
            });
        }
    }
    unreachable!("the final sweep point always has FAR − FRR = −1")
}

/// Mean and standard deviation of one score population.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScoreStats {
    pub mean: f64,
    pub std: f64,
}

impl ScoreStats {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: libm::sqrt(var),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub threshold: f64,
    pub n_trials: usize,
    pub n_same: usize,
    pub n_diff: usize,
    /// One score per trial, in trial-list order.
    pub scores: Vec<f64>,
    pub same: ScoreStats,
    pub diff: ScoreStats,
}

/// Row indices of every utterance id.
pub fn utterance_index(set: &EmbeddingSet) -> BTreeMap<&str, Vec<usize>> {
    let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (row, utt) in set.utt_ids.iter().enumerate() {
        index.entry(utt.as_str()).or_default().push(row);
    }
    index
}

/// Scores every trial after transferring the evaluation embeddings and
/// reports the EER. Enrollment and test sides go through the same transfer.
pub fn evaluate_pipeline(
    transfer: &dyn EmbeddingTransfer,
    eval: &EmbeddingSet,
    trials: &TrialList,
) -> Result<EvalReport> {
    let index = utterance_index(eval);
    for t in &trials.trials {
        for id in [&t.enroll, &t.test] {
            if !index.contains_key(id.as_str()) {
                return Err(Error::UnknownUtterance(id.clone()));
            }
        }
    }
    let moved = transfer.transfer(&eval.embeddings)?;
    if moved.rows() != eval.len() {
        return Err(shape_err!("transfer returned {} rows for {}", moved.rows(), eval.len()));
    }
    moved.ensure_finite("transferred embeddings")?;

    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        let enroll = moved.select_rows(&index[t.enroll.as_str()]);
        let test = moved.select_rows(&index[t.test.as_str()]);
        scores.push(trial_score(&enroll, &test)?);
    }
    let labels = trials.labels();
    let Eer { eer, threshold } = compute_eer(&scores, &labels)?;
    let pick = |want: SameDiff| {
        scores
            .iter()
            .zip(&labels)
            .filter(move |(_, l)| **l == want)
            .map(|(s, _)| *s)
    };
    Ok(EvalReport {
        eer,
        threshold,
        n_trials: trials.len(),
        n_same: trials.count(SameDiff::Same),
        n_diff: trials.count(SameDiff::Different),
        same: ScoreStats::of(pick(SameDiff::Same)),
        diff: ScoreStats::of(pick(SameDiff::Different)),
        scores,
    })
}
