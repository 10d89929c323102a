//! Synthetic two-domain speaker-embedding benchmark.
//!
//! Speakers are points in a random `speaker_rank`-dimensional subspace;
//! each embedding is its speaker centre plus isotropic noise, rescaled to
//! norm `sqrt(dim)`. Target-domain embeddings (training and evaluation) are
//! then pushed through a domain shift. Independent random streams are used
//! for speakers, samples, the shift and the trial list, so changing the
//! shift never changes the underlying clean samples.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Domain, EmbeddingSet};
use crate::error::{Error, Result};
use crate::eval::{SameDiff, Trial, TrialList};
use crate::matrix::Matrix;
use crate::rng::{normal_matrix, standard_normal, stream, Stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainShift {
    Identity,
    /// `y = A·x + b` with `A = diag(g)`, a random gain per channel drawn
    /// log-uniform in `[1/condition, condition]`, and `b ~ N(0, offset²·I)`.
    Affine { condition: f64, offset: f64 },
    /// Per-channel `x + alpha·tanh(beta·x)` followed by the affine map.
    Nonlinear {
        alpha: f64,
        beta: f64,
        condition: f64,
        offset: f64,
    },
}

impl DomainShift {
    pub const DEFAULT_NONLINEAR: DomainShift = DomainShift::Nonlinear {
        alpha: 0.5,
        beta: 2.0,
        condition: 4.0,
        offset: 1.0,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    /// Speakers in each training domain.
    pub n_speakers: usize,
    pub emb_per_speaker: usize,
    /// Held-out target-domain speakers used for evaluation.
    pub eval_speakers: usize,
    /// Embeddings (segments) per evaluation utterance.
    pub segments_per_utt: usize,
    pub dim: usize,
    /// Dimension of the subspace speaker centres live in.
    pub speaker_rank: usize,
    pub spread: f64,
    pub noise: f64,
    pub shift: DomainShift,
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_speakers: 50,
            emb_per_speaker: 40,
            eval_speakers: 20,
            segments_per_utt: 2,
            dim: 256,
            speaker_rank: 8,
            spread: 1.0,
            noise: 3.0,
            shift: DomainShift::DEFAULT_NONLINEAR,
            n_trials: 10_000,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("synth spec: {msg}")));
        if self.n_speakers < 2 || self.eval_speakers < 2 {
            return bad("need at least 2 speakers per set");
        }
        if self.emb_per_speaker < 2 {
            return bad("need at least 2 embeddings per speaker");
        }
        if self.segments_per_utt == 0 || self.emb_per_speaker % self.segments_per_utt != 0 {
            return bad("segments_per_utt must divide emb_per_speaker");
        }
        if self.emb_per_speaker / self.segments_per_utt < 2 {
            return bad("evaluation speakers need at least 2 utterances");
        }
        if self.dim == 0 || self.speaker_rank == 0 || self.speaker_rank > self.dim {
            return bad("need 1 <= speaker_rank <= dim");
        }
        if !(self.spread.is_finite() && self.noise.is_finite()) || self.spread < 0.0 || self.noise < 0.0 {
            return bad("spread and noise must be finite and non-negative");
        }
        if self.spread == 0.0 && self.noise == 0.0 {
            return bad("spread and noise cannot both be zero");
        }
        if self.n_trials < 2 {
            return bad("need at least 2 trials");
        }
        match self.shift {
            DomainShift::Identity => {}
            DomainShift::Affine { condition, offset }
            | DomainShift::Nonlinear {
                condition, offset, ..
            } => {
                if !(condition.is_finite() && condition >= 1.0) {
                    return bad("condition must be >= 1");
                }
                if !(offset.is_finite() && offset >= 0.0) {
                    return bad("offset must be finite and non-negative");
                }
            }
        }
        if let DomainShift::Nonlinear { alpha, beta, .. } = self.shift {
            if !(alpha.is_finite() && beta.is_finite()) || alpha < 0.0 {
                return bad("alpha must be non-negative and beta finite");
            }
        }
        Ok(())
    }
}

/// The four generated artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub src_train: EmbeddingSet,
    pub tar_train: EmbeddingSet,
    pub tar_eval: EmbeddingSet,
    pub trials: TrialList,
}

fn random_orthogonal(d: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    let g = normal_matrix(d, d, rng);
    DMatrix::from_row_slice(d, d, g.data()).qr().q()
}

fn to_matrix(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
}

/// Applies a target-domain shift to row embeddings.
struct Shift {
    gain: Vec<f64>,
    offset: Vec<f64>,
    warp: Option<(f64, f64)>,
}

impl Shift {
    fn build(shift: DomainShift, dim: usize, rng: &mut StreamRng) -> Option<Self> {
        let (condition, offset, warp) = match shift {
            DomainShift::Identity => return None,
            DomainShift::Affine { condition, offset } => (condition, offset, None),
            DomainShift::Nonlinear {
                alpha,
                beta,
                condition,
                offset,
            } => (condition, offset, Some((alpha, beta))),
        };
        let log_c = libm::log(condition);
        let gain = (0..dim)
            .map(|_| libm::exp(log_c * rng.gen_range(-1.0..=1.0)))
            .collect();
        let offset = (0..dim).map(|_| offset * standard_normal(rng)).collect();
        Some(Self { gain, offset, warp })
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.clone();
        for r in 0..y.rows() {
            for ((v, g), b) in y.row_mut(r).iter_mut().zip(&self.gain).zip(&self.offset) {
                let w = match self.warp {
                    Some((alpha, beta)) => *v + alpha * libm::tanh(beta * *v),
                    None => *v,
                };
                *v = g * w + b;
            }
        }
        y
    }
}

struct Speakers {
    basis: Matrix,
    scale: f64,
}

impl Speakers {
    fn centre(&self, rng: &mut StreamRng) -> Vec<f64> {
        let r = self.basis.cols();
        let coeffs = Matrix::from_fn(1, r, |_, _| self.scale * standard_normal(rng));
        coeffs.matmul_t(&self.basis).expect("basis shape").into_vec()
    }
}

fn draw_rows(centre: &[f64], count: usize, noise: f64, rng: &mut StreamRng) -> Matrix {
    let d = centre.len();
    let target_norm = libm::sqrt(d as f64);
    let mut m = Matrix::from_fn(count, d, |_, c| centre[c] + noise * standard_normal(rng));
    for r in 0..count {
        let row = m.row_mut(r);
        let n = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v *= target_norm / n);
        }
    }
    m
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let d = spec.dim;
    let mut spk_rng = stream(spec.seed, Stream::SynthSpeakers);
    let mut sample_rng = stream(spec.seed, Stream::SynthSamples);
    let mut shift_rng = stream(spec.seed, Stream::SynthShift);
    let mut trial_rng = stream(spec.seed, Stream::SynthTrials);

    let basis = to_matrix(&random_orthogonal(d, &mut spk_rng).columns(0, spec.speaker_rank).into_owned());
    // Keeps E‖centre‖² = spread²·dim whatever the rank.
    let speakers = Speakers {
        basis,
        scale: spec.spread * libm::sqrt(d as f64 / spec.speaker_rank as f64),
    };
    let shift = Shift::build(spec.shift, d, &mut shift_rng);

    let mut build_set = |domain: Domain, prefix: &str, n_spk: usize, segments: usize| {
        let mut parts = Vec::with_capacity(n_spk);
        let mut utt_ids: Vec<String> = Vec::new();
        let mut speaker_ids: Vec<String> = Vec::new();
        for s in 0..n_spk {
            let centre = speakers.centre(&mut spk_rng);
            parts.push(draw_rows(&centre, spec.emb_per_speaker, spec.noise, &mut sample_rng));
            for k in 0..spec.emb_per_speaker {
                let utt = if segments == 1 {
                    format!("{prefix}_s{s:04}_u{k:04}")
                } else {
                    format!("{prefix}_s{s:04}_u{:04}", k / segments)
                };
                utt_ids.push(utt);
                speaker_ids.push(format!("{prefix}_s{s:04}"));
            }
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        (domain, Matrix::vstack(&refs), utt_ids, speaker_ids)
    };

    let raw_src = build_set(Domain::Source, "src", spec.n_speakers, 1);
    let raw_tar = build_set(Domain::Target, "tar", spec.n_speakers, 1);
    let raw_eval = build_set(Domain::Target, "eval", spec.eval_speakers, spec.segments_per_utt);

    let finish = |(domain, m, utt, spk): (Domain, Result<Matrix>, Vec<String>, Vec<String>),
                  shifted: bool| {
        let m = m?;
        let m = match (&shift, shifted) {
            (Some(s), true) => s.apply(&m),
            _ => m,
        };
        EmbeddingSet::new(domain, m, utt, spk)
    };
    let src_train = finish(raw_src, false)?;
    let tar_train = finish(raw_tar, true)?;
    let tar_eval = finish(raw_eval, true)?;
    let trials = make_trials(spec, &mut trial_rng);

    Ok(SynthData {
        src_train,
        tar_train,
        tar_eval,
        trials,
    })
}

fn make_trials(spec: &SynthSpec, rng: &mut StreamRng) -> TrialList {
    let utts_per_spk = spec.emb_per_speaker / spec.segments_per_utt;
    let utt = |s: usize, u: usize| format!("eval_s{s:04}_u{u:04}");
    let n_same = spec.n_trials / 2;
    let mut trials = Vec::with_capacity(spec.n_trials);
    for i in 0..spec.n_trials {
        let trial = if i < n_same {
            let s = rng.gen_range(0..spec.eval_speakers);
            let a = rng.gen_range(0..utts_per_spk);
            let b = (a + rng.gen_range(1..utts_per_spk)) % utts_per_spk;
            Trial {
                enroll: utt(s, a),
                test: utt(s, b),
                label: SameDiff::Same,
            }
        } else {
            let s = rng.gen_range(0..spec.eval_speakers);
            let t = (s + rng.gen_range(1..spec.eval_speakers)) % spec.eval_speakers;
            Trial {
                enroll: utt(s, rng.gen_range(0..utts_per_spk)),
                test: utt(t, rng.gen_range(0..utts_per_spk)),
                label: SameDiff::Different,
            }
        };
        trials.push(trial);
    }
    trials.shuffle(rng);
    TrialList::new(trials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn tiny() -> SynthSpec {
        SynthSpec {
            n_speakers: 6,
            emb_per_speaker: 8,
            eval_speakers: 4,
            segments_per_utt: 2,
            dim: 16,
            speaker_rank: 4,
            n_trials: 40,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn shapes_ids_and_balance() {
        let data = generate_synthetic(&tiny()).unwrap();
        assert_eq!(data.src_train.len(), 48);
        assert_eq!(data.tar_train.len(), 48);
        assert_eq!(data.tar_eval.len(), 32);
        assert_eq!(data.tar_eval.dim(), 16);
        assert_eq!(data.src_train.domain, Domain::Source);
        assert_eq!(data.trials.count(SameDiff::Same), 20);
        assert_eq!(data.trials.count(SameDiff::Different), 20);
        let index = crate::eval::utterance_index(&data.tar_eval);
        assert_eq!(index.len(), 16);
        assert!(index.values().all(|rows| rows.len() == 2));
        for t in &data.trials.trials {
            assert!(index.contains_key(t.enroll.as_str()) && index.contains_key(t.test.as_str()));
            assert_ne!(t.enroll, t.test);
        }
    }

    #[test]
    fn eval_speakers_are_held_out() {
        let data = generate_synthetic(&tiny()).unwrap();
        let eval: BTreeSet<_> = data.tar_eval.speaker_ids.iter().collect();
        for set in [&data.src_train, &data.tar_train] {
            assert!(set.speaker_ids.iter().all(|s| !eval.contains(s)));
        }
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        assert_eq!(generate_synthetic(&tiny()).unwrap(), generate_synthetic(&tiny()).unwrap());
        let other = SynthSpec { seed: 43, ..tiny() };
        assert_ne!(generate_synthetic(&tiny()).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn shift_does_not_disturb_clean_samples() {
        let clean = generate_synthetic(&SynthSpec { shift: DomainShift::Identity, ..tiny() }).unwrap();
        let shifted = generate_synthetic(&tiny()).unwrap();
        assert_eq!(clean.src_train, shifted.src_train);
        assert_eq!(clean.trials, shifted.trials);
        assert_ne!(clean.tar_eval.embeddings, shifted.tar_eval.embeddings);
        for row in clean.tar_eval.embeddings.row_iter() {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 16.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SynthSpec { n_speakers: 1, ..tiny() },
            SynthSpec { emb_per_speaker: 1, ..tiny() },
            SynthSpec { segments_per_utt: 3, ..tiny() },
            SynthSpec { speaker_rank: 17, ..tiny() },
            SynthSpec { noise: f64::NAN, ..tiny() },
            SynthSpec { shift: DomainShift::Affine { condition: 0.5, offset: 0.0 }, ..tiny() },
        ] {
            assert!(matches!(generate_synthetic(&spec), Err(Error::Invalid(_))), "{spec:?}");
        }
    }
}
