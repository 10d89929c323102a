//! Training loop: per-domain batching, Adam with coupled L2 weight decay and
//! a per-step half-cosine learning-rate schedule.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::seq::SliceRandom;

use crate::baselines::{compute_stats, DomainStats};
use crate::cvae::{DomainLabel, EditnetModel, ModelDims, ModelOptions, LOG_VAR_CLAMP};
use crate::data::prenormalize;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::matrix::Matrix;
use crate::nn::{Module, BN_EPSILON, BN_MOMENTUM};
use crate::objective::{train_step, LossOptions, StepNoise};
use crate::rng::{normal_matrix, stream, Stream, StreamRng};

/// Ablation variants. Exactly one is active per run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Skip per-domain pre-normalization.
    NoPrenorm,
    /// One global N(0, I) prior and no latent shift.
    NoPriorTransfer,
    /// Drop the cosine repulsion from the total loss.
    NoCosine,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoPrenorm,
        Variant::NoPriorTransfer,
        Variant::NoCosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrenorm => "no_prenorm",
            Variant::NoPriorTransfer => "no_prior_transfer",
            Variant::NoCosine => "no_cosine",
        }
    }

    pub fn prenorm(self) -> bool {
        self != Variant::NoPrenorm
    }

    pub fn prior_transfer(self) -> bool {
        self != Variant::NoPriorTransfer
    }

    pub fn cosine(self) -> bool {
        self != Variant::NoCosine
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_per_domain: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub variant: Variant,
    pub z_dim: usize,
    pub log_var_clamp: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_per_domain: 256,
            epochs: 20,
            lr0: 1e-3,
            weight_decay: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            variant: Variant::Full,
            z_dim: 128,
            log_var_clamp: LOG_VAR_CLAMP,
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Invalid(format!("train config: {msg}")));
        if self.batch_per_domain < 2 {
            return bad("batch_per_domain must be at least 2");
        }
        if self.epochs == 0 || self.z_dim == 0 {
            return bad("epochs and z_dim must be positive");
        }
        let rates = [
            self.lr0,
            self.adam_eps,
            self.log_var_clamp,
            self.bn_momentum,
            self.bn_epsilon,
        ];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return bad("rates and constants must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        for b in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&b) {
                return bad("adam betas must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Model dims for embeddings of width `x_dim`, scaling the hidden widths
    /// the same way the 256/128 configuration does.
    pub fn model_dims(&self, x_dim: usize) -> ModelDims {
        ModelDims {
            z_dim: self.z_dim,
            ..ModelDims::scaled(x_dim, self.z_dim)
        }
    }

    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            prior_transfer: self.variant.prior_transfer(),
            log_var_clamp: self.log_var_clamp,
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
        }
    }
}

/// `lr0 · ½(1 + cos(π · step / total_steps))`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Invalid("cosine schedule over zero steps".into()));
    }
    if step >= total_steps {
        return Err(Error::Invalid(format!("step {step} beyond schedule of {total_steps}")));
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + libm::cos(phase)))
}

/// Adam moments for every parameter tensor, in visiting order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamParams {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
        }
    }
}

impl AdamState {
    /// One update of `params` given `grads`. Weight decay is added to the
    /// gradient before the moment updates (coupled L2).
    pub fn step_slices(
        &mut self,
        tensors: &mut [(&mut [f64], &[f64])],
        lr: f64,
        p: AdamParams,
    ) -> Result<()> {
        if tensors.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient"));
        }
        if self.m.is_empty() {
            self.m = tensors.iter().map(|(w, _)| alloc::vec![0.0; w.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != tensors.len()
            || self.m.iter().zip(tensors.iter()).any(|(m, (w, _))| m.len() != w.len())
        {
            return Err(Error::Shape("adam state does not match parameters".into()));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(p.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(p.beta2, self.t as f64);
        for (k, (w, g)) in tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..w.len() {
                let grad = g[i] + p.weight_decay * w[i];
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grad;
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grad * grad;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (libm::sqrt(v_hat) + p.eps);
            }
        }
        Ok(())
    }

    /// Updates every trainable parameter of `module` from its gradients.
    pub fn step<M: Module>(&mut self, module: &mut M, lr: f64, p: AdamParams) -> Result<()> {
        let mut params: Vec<Vec<f64>> = Vec::new();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        module.visit_params("", &mut |_, w, g| {
            params.push(w.to_vec());
            grads.push(g.to_vec());
        });
        let mut tensors: Vec<(&mut [f64], &[f64])> = params
            .iter_mut()
            .zip(&grads)
            .map(|(w, g)| (w.as_mut_slice(), g.as_slice()))
            .collect();
        self.step_slices(&mut tensors, lr, p)?;
        let mut k = 0;
        module.visit_params("", &mut |_, w, _| {
            w.copy_from_slice(&params[k]);
            k += 1;
        });
        Ok(())
    }
}

/// Row indices of one step's target and source batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPair {
    pub target: Vec<usize>,
    pub source: Vec<usize>,
}

/// Per-epoch batch assembly.
///
/// An epoch is one shuffled pass over the target set in
/// `floor(n_tar / batch)` steps. Source batches are drawn without
/// replacement from a shuffled pool that is reshuffled whenever it runs
/// short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n_tar: usize,
    batch: usize,
    pool: Vec<usize>,
    cursor: usize,
    rng: StreamRng,
}

impl BatchSampler {
    pub fn new(n_tar: usize, n_src: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch < 2 {
            return Err(Error::Invalid("batch size below 2".into()));
        }
        for n in [n_tar, n_src] {
            if n < batch {
                return Err(Error::TooFewRows { needed: batch, got: n });
            }
        }
        let mut rng = stream(seed, Stream::Batches);
        let mut pool: Vec<usize> = (0..n_src).collect();
        pool.shuffle(&mut rng);
        Ok(Self {
            n_tar,
            batch,
            pool,
            cursor: 0,
            rng,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_tar / self.batch
    }

    pub fn next_epoch(&mut self) -> Vec<BatchPair> {
        let mut order: Vec<usize> = (0..self.n_tar).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::with_capacity(self.steps_per_epoch());
        for chunk in order.chunks_exact(self.batch) {
            if self.cursor + self.batch > self.pool.len() {
                self.pool.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let source = self.pool[self.cursor..self.cursor + self.batch].to_vec();
            self.cursor += self.batch;
            out.push(BatchPair {
                target: chunk.to_vec(),
                source,
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EditnetModel,
    pub log: Vec<TrainLogRecord>,
    pub adam_steps: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Invalid(#[from] Error),

    /// The loss or a gradient went non-finite. `last_good` is the model as
    /// it was before the failing step.
    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_good: Box<EditnetModel>,
        log: Vec<TrainLogRecord>,
    },
}

/// Trains a fresh model on pre-normalized target and source embeddings.
/// Only embedding values are seen; no speaker information reaches here.
pub fn train(x_tar: &Matrix, x_src: &Matrix, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_hook(x_tar, x_src, config, |_| {})
}

/// As [`train`], calling `on_step` after every logged step.
pub fn train_with_hook(
    x_tar: &Matrix,
    x_src: &Matrix,
    config: &TrainConfig,
    mut on_step: impl FnMut(&TrainLogRecord),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if x_tar.cols() != x_src.cols() {
        return Err(Error::Shape(format!(
            "target width {} vs source width {}",
            x_tar.cols(),
            x_src.cols()
        ))
        .into());
    }
    x_tar.ensure_finite("target embeddings")?;
    x_src.ensure_finite("source embeddings")?;

    let mut model = EditnetModel::new(
        config.model_dims(x_tar.cols()),
        config.model_options(),
        config.seed,
    );
    let mut sampler = BatchSampler::new(x_tar.rows(), x_src.rows(), config.batch_per_domain, config.seed)?;
    let mut noise_rng = stream(config.seed, Stream::Noise);
    let total_steps = config.epochs * sampler.steps_per_epoch();
    let adam_params = AdamParams::from(config);
    let loss_opts = LossOptions {
        cosine: config.variant.cosine(),
    };
    let z_dim = config.z_dim;

    let mut adam = AdamState::default();
    let mut log = Vec::with_capacity(total_steps);
    let mut step = 0;
    for epoch in 0..config.epochs {
        for batch in sampler.next_epoch() {
            let lr = cosine_lr(step, total_steps, config.lr0)?;
            let xt = x_tar.select_rows(&batch.target);
            let xs = x_src.select_rows(&batch.source);
            let noise = StepNoise {
                target: normal_matrix(xt.rows(), z_dim, &mut noise_rng),
                source: normal_matrix(xs.rows(), z_dim, &mut noise_rng),
            };
            let snapshot = model.clone();
            model.zero_grad();
            let diverged = |model: EditnetModel, log: Vec<TrainLogRecord>| TrainError::Diverged {
                step,
                last_good: Box::new(model),
                log,
            };
            let loss = match train_step(&mut model, &xt, &xs, &noise, loss_opts, true) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => return Err(diverged(snapshot, log)),
                Err(e) => return Err(e.into()),
            };
            match adam.step(&mut model, lr, adam_params) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => return Err(diverged(snapshot, log)),
                Err(e) => return Err(e.into()),
            }
            let record = TrainLogRecord {
                step,
                epoch,
                lr,
                loss,
            };
            on_step(&record);
            log.push(record);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        adam_steps: adam.t,
    })
}

/// A trained model with the statistics its inputs were normalized with.
#[derive(Clone, Debug)]
pub struct TrainedPipeline {
    pub config: TrainConfig,
    pub model: EditnetModel,
    pub tar_stats: DomainStats,
    pub src_stats: DomainStats,
    pub log: Vec<TrainLogRecord>,
    pub adam_steps: u64,
}

impl TrainedPipeline {
    /// Pre-normalization applied before transfer, if the variant uses it.
    pub fn prenorm_stats(&self) -> Option<&DomainStats> {
        self.config.variant.prenorm().then_some(&self.tar_stats)
    }
}

/// Computes per-domain stats, pre-normalizes (unless the variant skips it)
/// and trains.
pub fn train_pipeline(
    tar: &Matrix,
    src: &Matrix,
    config: &TrainConfig,
    on_step: impl FnMut(&TrainLogRecord),
) -> Result<TrainedPipeline, TrainError> {
    let tar_stats = compute_stats(tar)?;
    let src_stats = compute_stats(src)?;
    let (xt, xs) = if config.variant.prenorm() {
        (prenormalize(tar, &tar_stats)?, prenormalize(src, &src_stats)?)
    } else {
        (tar.clone(), src.clone())
    };
    let out = train_with_hook(&xt, &xs, config, on_step)?;
    Ok(TrainedPipeline {
        config: config.clone(),
        model: out.model,
        tar_stats,
        src_stats,
        log: out.log,
        adam_steps: out.adam_steps,
    })
}

/// Mean squared reconstruction error of eval-mode round trips.
pub fn reconstruction_error(model: &EditnetModel, x: &Matrix, c: DomainLabel) -> Result<f64> {
    crate::losses::loss_rec(x, &model.reconstruct(x, c)?)
}
