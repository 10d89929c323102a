//! The conditional VAE that moves embeddings between domains.
//!
//! Encoder: `[x | c] → FC → ReLU → BN → FC → tanh → (μ head, log σ² head)`.
//! Decoder: `[z | c] → FC → ReLU → BN → FC → ReLU → BN → FC`, followed by
//! the batch-norm of the requested domain. The prior means of the two
//! domains come from a 2 → z_dim fully connected layer applied to the
//! one-hot domain label; prior covariances are fixed at identity.
//!
//! Transfer from target to source encodes with the target label, shifts
//! the latent by `prior(source) − prior(target)`, decodes with the source
//! label and applies the source batch-norm.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::nn::{
    Activation, BatchNorm, BatchNormCache, Linear, Mode, Module, ParamVisitor, BN_EPSILON,
    BN_MOMENTUM,
};
use crate::rng::{normal_matrix, stream, Stream};

pub const LOG_VAR_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainLabel {
    Target,
    Source,
}

impl DomainLabel {
    pub fn one_hot(self) -> [f64; 2] {
        match self {
            DomainLabel::Target => [1.0, 0.0],
            DomainLabel::Source => [0.0, 1.0],
        }
    }

    pub fn index(self) -> usize {
        match self {
            DomainLabel::Target => 0,
            DomainLabel::Source => 1,
        }
    }
}

/// Layer widths. [`ModelDims::TABLE1`] is the published configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub x_dim: usize,
    pub z_dim: usize,
    pub enc_hidden: usize,
    pub dec_hidden: usize,
    pub dec_wide: usize,
}

impl ModelDims {
    pub const TABLE1: ModelDims = ModelDims {
        x_dim: 256,
        z_dim: 128,
        enc_hidden: 256,
        dec_hidden: 256,
        dec_wide: 512,
    };

    /// Same topology with every width scaled from `x_dim`.
    pub fn scaled(x_dim: usize, z_dim: usize) -> Self {
        Self {
            x_dim,
            z_dim,
            enc_hidden: x_dim,
            dec_hidden: x_dim,
            dec_wide: 2 * x_dim,
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::TABLE1
    }
}

/// Construction-time constants stored alongside the parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelOptions {
    /// `false` pins both prior means to zero (one global N(0, I) prior) and
    /// removes the latent shift from transfer.
    pub prior_transfer: bool,
    pub log_var_clamp: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            prior_transfer: true,
            log_var_clamp: LOG_VAR_CLAMP,
            bn_momentum: BN_MOMENTUM,
            bn_epsilon: BN_EPSILON,
        }
    }
}

/// Latent draws for one batch. `z = mu + exp(log_var / 2) ⊙ noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBatch {
    pub mu: Matrix,
    pub log_var: Matrix,
    pub z: Matrix,
    pub noise: Matrix,
}

/// Reparameterized sampling. Eval mode returns `z = mu` with zero noise.
pub fn sample_latent<R: Rng + ?Sized>(
    mu: &Matrix,
    log_var: &Matrix,
    mode: Mode,
    rng: &mut R,
) -> Result<LatentBatch> {
    let noise = match mode {
        Mode::Train => normal_matrix(mu.rows(), mu.cols(), rng),
        Mode::Eval => Matrix::zeros(mu.rows(), mu.cols()),
    };
    latent_with_noise(mu, log_var, noise)
}

pub fn latent_with_noise(mu: &Matrix, log_var: &Matrix, noise: Matrix) -> Result<LatentBatch> {
    mu.same_shape(log_var, "sample_latent")?;
    mu.same_shape(&noise, "sample_latent noise")?;
    let mut z = mu.clone();
    for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(log_var.data()).zip(noise.data()) {
        *zv += libm::exp(0.5 * lv) * e;
    }
    Ok(LatentBatch {
        mu: mu.clone(),
        log_var: log_var.clone(),
        z,
        noise,
    })
}

fn with_label(x: &Matrix, c: DomainLabel) -> Result<Matrix> {
    let hot = c.one_hot();
    x.hconcat(&Matrix::from_fn(x.rows(), 2, |_, j| hot[j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditnetModel {
    dims: ModelDims,
    options: ModelOptions,
    pub enc_fc1: Linear,
    pub enc_bn1: BatchNorm,
    pub enc_fc2: Linear,
    pub mu_head: Linear,
    pub log_var_head: Linear,
    pub dec_fc1: Linear,
    pub dec_bn1: BatchNorm,
    pub dec_fc2: Linear,
    pub dec_bn2: BatchNorm,
    pub dec_out: Linear,
    pub prior_fc: Linear,
    pub bn_tar: BatchNorm,
    pub bn_src: BatchNorm,
}

/// Intermediates of a train-mode encoder pass.
#[derive(Clone, Debug)]
pub(crate) struct EncoderTrace {
    input: Matrix,
    relu1: Matrix,
    bn1: BatchNormCache,
    hidden: Matrix,
    tanh: Matrix,
    pub mu: Matrix,
    pub log_var: Matrix,
    log_var_raw: Matrix,
}

/// Intermediates of a train-mode decoder pass (before the domain batch-norm).
#[derive(Clone, Debug)]
pub(crate) struct DecoderTrace {
    input: Matrix,
    relu1: Matrix,
    bn1: BatchNormCache,
    hidden1: Matrix,
    relu2: Matrix,
    bn2: BatchNormCache,
    hidden2: Matrix,
    pub out: Matrix,
}

impl EncoderTrace {
    /// Which ReLU units fired and which log-variances sat inside the clamp.
    pub(crate) fn branches(&self, clamp: f64, out: &mut Vec<bool>) {
        out.extend(self.relu1.data().iter().map(|v| *v > 0.0));
        out.extend(self.log_var_raw.data().iter().map(|v| v.abs() <= clamp));
    }
}

impl DecoderTrace {
    pub(crate) fn branches(&self, out: &mut Vec<bool>) {
        for m in [&self.relu1, &self.relu2] {
            out.extend(m.data().iter().map(|v| *v > 0.0));
        }
    }
}

impl EditnetModel {
    /// Fresh model. FC layers feeding a ReLU get scaled-normal fan-in
    /// initialization, the rest uniform(±1/sqrt(fan_in)); biases start at 0.
    pub fn new(dims: ModelDims, options: ModelOptions, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Init);
        let bn = |w| BatchNorm::with_constants(w, options.bn_momentum, options.bn_epsilon);
        let ModelDims {
            x_dim,
            z_dim,
            enc_hidden,
            dec_hidden,
            dec_wide,
        } = dims;
        Self {
            dims,
            options,
            enc_fc1: Linear::init_he(x_dim + 2, enc_hidden, &mut rng),
            enc_bn1: bn(enc_hidden),
            enc_fc2: Linear::init_uniform(enc_hidden, z_dim, &mut rng),
            mu_head: Linear::init_uniform(z_dim, z_dim, &mut rng),
            log_var_head: Linear::init_uniform(z_dim, z_dim, &mut rng),
            dec_fc1: Linear::init_he(z_dim + 2, dec_hidden, &mut rng),
            dec_bn1: bn(dec_hidden),
            dec_fc2: Linear::init_he(dec_hidden, dec_wide, &mut rng),
            dec_bn2: bn(dec_wide),
            dec_out: Linear::init_uniform(dec_wide, x_dim, &mut rng),
            prior_fc: Linear::init_uniform(2, z_dim, &mut rng),
            bn_tar: bn(x_dim),
            bn_src: bn(x_dim),
        }
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn options(&self) -> ModelOptions {
        self.options
    }

    pub fn prior_transfer(&self) -> bool {
        self.options.prior_transfer
    }

    /// `(name, in, out)` for every fully connected and batch-norm layer, in
    /// forward order. Batch-norm rows report `in == out == width`.
    pub fn layer_shapes(&self) -> Vec<(&'static str, usize, usize)> {
        let fc = |l: &Linear| (l.in_dim(), l.out_dim());
        let bn = |b: &BatchNorm| (b.width(), b.width());
        let rows = [
            ("enc.fc1", fc(&self.enc_fc1)),
            ("enc.bn1", bn(&self.enc_bn1)),
            ("enc.fc2", fc(&self.enc_fc2)),
            ("enc.mu", fc(&self.mu_head)),
            ("enc.log_var", fc(&self.log_var_head)),
            ("dec.fc1", fc(&self.dec_fc1)),
            ("dec.bn1", bn(&self.dec_bn1)),
            ("dec.fc2", fc(&self.dec_fc2)),
            ("dec.bn2", bn(&self.dec_bn2)),
            ("dec.out", fc(&self.dec_out)),
            ("bn_tar", bn(&self.bn_tar)),
            ("bn_src", bn(&self.bn_src)),
            ("prior", fc(&self.prior_fc)),
        ];
        rows.into_iter().map(|(n, (i, o))| (n, i, o)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        let mut me = self.clone();
        me.options.prior_transfer = true;
        me.visit_params("", &mut |_, p, _| n += p.len());
        n
    }

    /// Mean of the latent prior for domain `c`.
    pub fn prior_mean(&self, c: DomainLabel) -> Vec<f64> {
        if !self.options.prior_transfer {
            return vec![0.0; self.dims.z_dim];
        }
        let w = self.prior_fc.weight.row(c.index());
        w.iter().zip(&self.prior_fc.bias).map(|(a, b)| a + b).collect()
    }

    fn check_cols(&self, m: &Matrix, want: usize, what: &str) -> Result<()> {
        if m.cols() != want {
            return Err(shape_err!("{what} expects {want} columns, got {}", m.cols()));
        }
        Ok(())
    }

    fn clamp_log_var(&self, raw: &Matrix) -> Matrix {
        let c = self.options.log_var_clamp;
        raw.map(|v| v.clamp(-c, c))
    }

    /// Eval-mode encoder: `(mu, log_var)`.
    pub fn encode(&self, x: &Matrix, c: DomainLabel) -> Result<(Matrix, Matrix)> {
        self.check_cols(x, self.dims.x_dim, "encode")?;
        let input = with_label(x, c)?;
        let a1 = Activation::Relu.forward(&self.enc_fc1.forward(&input)?);
        let h1 = self.enc_bn1.forward_eval(&a1)?;
        let t = Activation::Tanh.forward(&self.enc_fc2.forward(&h1)?);
        let mu = self.mu_head.forward(&t)?;
        let log_var = self.clamp_log_var(&self.log_var_head.forward(&t)?);
        Ok((mu, log_var))
    }

    /// Eval-mode decoder output, before the domain batch-norm.
    pub fn decode(&self, z: &Matrix, c: DomainLabel) -> Result<Matrix> {
        self.check_cols(z, self.dims.z_dim, "decode")?;
        let input = with_label(z, c)?;
        let a1 = Activation::Relu.forward(&self.dec_fc1.forward(&input)?);
        let h1 = self.dec_bn1.forward_eval(&a1)?;
        let a2 = Activation::Relu.forward(&self.dec_fc2.forward(&h1)?);
        let h2 = self.dec_bn2.forward_eval(&a2)?;
        self.dec_out.forward(&h2)
    }

    pub fn domain_bn_layer(&self, c: DomainLabel) -> &BatchNorm {
        match c {
            DomainLabel::Target => &self.bn_tar,
            DomainLabel::Source => &self.bn_src,
        }
    }

    fn domain_bn_layer_mut(&mut self, c: DomainLabel) -> &mut BatchNorm {
        match c {
            DomainLabel::Target => &mut self.bn_tar,
            DomainLabel::Source => &mut self.bn_src,
        }
    }

    pub fn domain_bn(&self, y: &Matrix, c: DomainLabel) -> Result<Matrix> {
        self.check_cols(y, self.dims.x_dim, "domain_bn")?;
        self.domain_bn_layer(c).forward_eval(y)
    }

    pub fn domain_bn_train(&mut self, y: &Matrix, c: DomainLabel) -> Result<Matrix> {
        self.check_cols(y, self.dims.x_dim, "domain_bn")?;
        self.domain_bn_layer_mut(c).forward_train(y).map(|(out, _)| out)
    }

    /// Eval-mode same-domain round trip, `z = mu`.
    pub fn reconstruct(&self, x: &Matrix, c: DomainLabel) -> Result<Matrix> {
        let (mu, _) = self.encode(x, c)?;
        self.domain_bn(&self.decode(&mu, c)?, c)
    }

    /// `z − prior(target) + prior(source)`, or `z` unchanged without prior transfer.
    pub fn shift_latent(&self, z: &Matrix) -> Result<Matrix> {
        let mut shifted = z.clone();
        if self.options.prior_transfer {
            let p_tar = self.prior_mean(DomainLabel::Target);
            let p_src = self.prior_mean(DomainLabel::Source);
            let delta: Vec<f64> = p_src.iter().zip(&p_tar).map(|(s, t)| s - t).collect();
            shifted.add_row_vector(&delta)?;
        }
        Ok(shifted)
    }

    /// Eval-mode transfer of target embeddings (already pre-normalized) into
    /// the source domain.
    pub fn transfer(&self, x_tar: &Matrix) -> Result<Matrix> {
        let (mu, _) = self.encode(x_tar, DomainLabel::Target)?;
        let z = self.shift_latent(&mu)?;
        self.domain_bn(&self.decode(&z, DomainLabel::Source)?, DomainLabel::Source)
    }

    /// Round trip in either mode. Train mode samples the latent and updates
    /// batch-norm running statistics.
    pub fn reconstruct_with<R: Rng + ?Sized>(
        &mut self,
        x: &Matrix,
        c: DomainLabel,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Matrix> {
        match mode {
            Mode::Eval => self.reconstruct(x, c),
            Mode::Train => {
                let enc = self.encode_train(x, c)?;
                let lat = sample_latent(&enc.mu, &enc.log_var, mode, rng)?;
                let dec = self.decode_train(&lat.z, c)?;
                self.domain_bn_layer_mut(c).forward_train(&dec.out).map(|(y, _)| y)
            }
        }
    }

    /// Target → source transfer in either mode.
    pub fn transfer_with<R: Rng + ?Sized>(
        &mut self,
        x_tar: &Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Matrix> {
        match mode {
            Mode::Eval => self.transfer(x_tar),
            Mode::Train => {
                let enc = self.encode_train(x_tar, DomainLabel::Target)?;
                let lat = sample_latent(&enc.mu, &enc.log_var, mode, rng)?;
                let z = self.shift_latent(&lat.z)?;
                let dec = self.decode_train(&z, DomainLabel::Source)?;
                self.bn_src.forward_train(&dec.out).map(|(y, _)| y)
            }
        }
    }

    pub(crate) fn encode_train(&mut self, x: &Matrix, c: DomainLabel) -> Result<EncoderTrace> {
        self.check_cols(x, self.dims.x_dim, "encode")?;
        let input = with_label(x, c)?;
        let relu1 = Activation::Relu.forward(&self.enc_fc1.forward(&input)?);
        let (hidden, bn1) = self.enc_bn1.forward_train(&relu1)?;
        let tanh = Activation::Tanh.forward(&self.enc_fc2.forward(&hidden)?);
        let mu = self.mu_head.forward(&tanh)?;
        let log_var_raw = self.log_var_head.forward(&tanh)?;
        let log_var = self.clamp_log_var(&log_var_raw);
        Ok(EncoderTrace {
            input,
            relu1,
            bn1,
            hidden,
            tanh,
            mu,
            log_var,
            log_var_raw,
        })
    }

    /// Backpropagates `(dmu, dlog_var)` through the encoder; returns the
    /// gradient for the embedding columns of the input.
    pub(crate) fn encode_backward(
        &mut self,
        tr: &EncoderTrace,
        dmu: &Matrix,
        dlog_var: &Matrix,
    ) -> Result<Matrix> {
        let c = self.options.log_var_clamp;
        let dlv_raw = tr
            .log_var_raw
            .zip_map(dlog_var, |raw, g| if raw.abs() <= c { g } else { 0.0 })?;
        let mut dt = self.mu_head.backward(&tr.tanh, dmu)?;
        dt.add_assign(&self.log_var_head.backward(&tr.tanh, &dlv_raw)?)?;
        let dp2 = Activation::Tanh.backward(&tr.tanh, &dt)?;
        let dh = self.enc_fc2.backward(&tr.hidden, &dp2)?;
        let da1 = self.enc_bn1.backward(&tr.bn1, &dh)?;
        let dp1 = Activation::Relu.backward(&tr.relu1, &da1)?;
        let din = self.enc_fc1.backward(&tr.input, &dp1)?;
        Ok(din.take_cols(self.dims.x_dim))
    }

    pub(crate) fn decode_train(&mut self, z: &Matrix, c: DomainLabel) -> Result<DecoderTrace> {
        self.check_cols(z, self.dims.z_dim, "decode")?;
        let input = with_label(z, c)?;
        let relu1 = Activation::Relu.forward(&self.dec_fc1.forward(&input)?);
        let (hidden1, bn1) = self.dec_bn1.forward_train(&relu1)?;
        let relu2 = Activation::Relu.forward(&self.dec_fc2.forward(&hidden1)?);
        let (hidden2, bn2) = self.dec_bn2.forward_train(&relu2)?;
        let out = self.dec_out.forward(&hidden2)?;
        Ok(DecoderTrace {
            input,
            relu1,
            bn1,
            hidden1,
            relu2,
            bn2,
            hidden2,
            out,
        })
    }

    /// Backpropagates through the decoder; returns the gradient for `z`.
    pub(crate) fn decode_backward(&mut self, tr: &DecoderTrace, dout: &Matrix) -> Result<Matrix> {
        let dh2 = self.dec_out.backward(&tr.hidden2, dout)?;
        let da2 = self.dec_bn2.backward(&tr.bn2, &dh2)?;
        let dp2 = Activation::Relu.backward(&tr.relu2, &da2)?;
        let dh1 = self.dec_fc2.backward(&tr.hidden1, &dp2)?;
        let da1 = self.dec_bn1.backward(&tr.bn1, &dh1)?;
        let dp1 = Activation::Relu.backward(&tr.relu1, &da1)?;
        let din = self.dec_fc1.backward(&tr.input, &dp1)?;
        Ok(din.take_cols(self.dims.z_dim))
    }

    pub(crate) fn domain_bn_forward_train(
        &mut self,
        y: &Matrix,
        c: DomainLabel,
    ) -> Result<(Matrix, BatchNormCache)> {
        self.domain_bn_layer_mut(c).forward_train(y)
    }

    pub(crate) fn domain_bn_backward(
        &mut self,
        c: DomainLabel,
        cache: &BatchNormCache,
        dy: &Matrix,
    ) -> Result<Matrix> {
        self.domain_bn_layer_mut(c).backward(cache, dy)
    }

    /// Accumulates the gradient of a prior mean into the prior layer.
    pub(crate) fn prior_backward(&mut self, c: DomainLabel, dprior: &[f64]) -> Result<()> {
        if !self.options.prior_transfer {
            return Ok(());
        }
        let x = Matrix::row_vector(&c.one_hot());
        self.prior_fc.backward(&x, &Matrix::row_vector(dprior))?;
        Ok(())
    }

    /// FNV-1a over the bits of every parameter and buffer.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        self.visit_state("", &mut |name, values| {
            eat(name.as_bytes());
            for v in values {
                eat(&v.to_bits().to_le_bytes());
            }
        });
        h
    }

    /// Rebuilds a model with the given widths and options and fills it from
    /// a state visitor (the inverse of [`Module::visit_state`]).
    pub fn from_state(
        dims: ModelDims,
        options: ModelOptions,
        mut fill: impl FnMut(&str, &mut [f64]) -> Result<()>,
    ) -> Result<Self> {
        let mut model = Self::new(dims, options, 0);
        let mut first_err: Option<Error> = None;
        model.visit_state_mut("", &mut |name, values| {
            if first_err.is_none() {
                if let Err(e) = fill(name, values) {
                    first_err = Some(e);
                }
            }
        });
        match first_err {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }
}

impl Module for EditnetModel {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        let p = |s: &str| alloc::format!("{prefix}{s}");
        self.enc_fc1.visit_params(&p("enc.fc1."), f);
        self.enc_bn1.visit_params(&p("enc.bn1."), f);
        self.enc_fc2.visit_params(&p("enc.fc2."), f);
        self.mu_head.visit_params(&p("enc.mu."), f);
        self.log_var_head.visit_params(&p("enc.log_var."), f);
        self.dec_fc1.visit_params(&p("dec.fc1."), f);
        self.dec_bn1.visit_params(&p("dec.bn1."), f);
        self.dec_fc2.visit_params(&p("dec.fc2."), f);
        self.dec_bn2.visit_params(&p("dec.bn2."), f);
        self.dec_out.visit_params(&p("dec.out."), f);
        self.bn_tar.visit_params(&p("bn_tar."), f);
        self.bn_src.visit_params(&p("bn_src."), f);
        // A global zero prior has nothing to learn.
        if self.options.prior_transfer {
            self.prior_fc.visit_params(&p("prior."), f);
        }
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        let p = |s: &str| alloc::format!("{prefix}{s}");
        self.enc_fc1.visit_state(&p("enc.fc1."), f);
        self.enc_bn1.visit_state(&p("enc.bn1."), f);
        self.enc_fc2.visit_state(&p("enc.fc2."), f);
        self.mu_head.visit_state(&p("enc.mu."), f);
        self.log_var_head.visit_state(&p("enc.log_var."), f);
        self.dec_fc1.visit_state(&p("dec.fc1."), f);
        self.dec_bn1.visit_state(&p("dec.bn1."), f);
        self.dec_fc2.visit_state(&p("dec.fc2."), f);
        self.dec_bn2.visit_state(&p("dec.bn2."), f);
        self.dec_out.visit_state(&p("dec.out."), f);
        self.bn_tar.visit_state(&p("bn_tar."), f);
        self.bn_src.visit_state(&p("bn_src."), f);
        self.prior_fc.visit_state(&p("prior."), f);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        let p = |s: &str| alloc::format!("{prefix}{s}");
        self.enc_fc1.visit_state_mut(&p("enc.fc1."), f);
        self.enc_bn1.visit_state_mut(&p("enc.bn1."), f);
        self.enc_fc2.visit_state_mut(&p("enc.fc2."), f);
        self.mu_head.visit_state_mut(&p("enc.mu."), f);
        self.log_var_head.visit_state_mut(&p("enc.log_var."), f);
        self.dec_fc1.visit_state_mut(&p("dec.fc1."), f);
        self.dec_bn1.visit_state_mut(&p("dec.bn1."), f);
        self.dec_fc2.visit_state_mut(&p("dec.fc2."), f);
        self.dec_bn2.visit_state_mut(&p("dec.bn2."), f);
        self.dec_out.visit_state_mut(&p("dec.out."), f);
        self.bn_tar.visit_state_mut(&p("bn_tar."), f);
        self.bn_src.visit_state_mut(&p("bn_src."), f);
        self.prior_fc.visit_state_mut(&p("prior."), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal;

    fn small() -> EditnetModel {
        EditnetModel::new(ModelDims::scaled(12, 6), ModelOptions::default(), 5)
    }

    fn probe(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, Stream::Probe);
        normal_matrix(rows, cols, &mut rng)
    }

    #[test]
    fn one_hot_labels() {
        assert_eq!(DomainLabel::Target.one_hot(), [1.0, 0.0]);
        assert_eq!(DomainLabel::Source.one_hot(), [0.0, 1.0]);
        for c in [DomainLabel::Target, DomainLabel::Source] {
            assert_eq!(c.one_hot().iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn table1_layer_audit() {
        let model = EditnetModel::new(ModelDims::TABLE1, ModelOptions::default(), 0);
        let expected: [(&str, usize, usize); 13] = [
            ("enc.fc1", 258, 256),
            ("enc.bn1", 256, 256),
            ("enc.fc2", 256, 128),
            ("enc.mu", 128, 128),
            ("enc.log_var", 128, 128),
            ("dec.fc1", 130, 256),
            ("dec.bn1", 256, 256),
            ("dec.fc2", 256, 512),
            ("dec.bn2", 512, 512),
            ("dec.out", 512, 256),
            ("bn_tar", 256, 256),
            ("bn_src", 256, 256),
            ("prior", 2, 128),
        ];
        assert_eq!(model.layer_shapes(), expected.to_vec());
        // FC: in*out + out; BN: gamma + beta
        assert_eq!(model.parameter_count(), 432_128);
    }

    #[test]
    fn zero_input_gives_finite_latents() {
        let model = EditnetModel::new(ModelDims::TABLE1, ModelOptions::default(), 1);
        let (mu, lv) = model.encode(&Matrix::zeros(2, 256), DomainLabel::Target).unwrap();
        assert!(mu.is_finite() && lv.is_finite());
        assert_eq!(mu.shape(), (2, 128));
    }

    #[test]
    fn eval_encode_and_decode_are_deterministic_per_row() {
        let model = small();
        let row = probe(1, 12, 1);
        let x = Matrix::vstack(&[&row, &row]).unwrap();
        let (mu, _) = model.encode(&x, DomainLabel::Source).unwrap();
        assert_eq!(mu.row(0), mu.row(1));
        let y = model.decode(&mu, DomainLabel::Source).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert_eq!(model.decode(&probe(3, 6, 2), DomainLabel::Target).unwrap().shape(), (3, 12));
        assert!(matches!(model.encode(&probe(1, 11, 1), DomainLabel::Target), Err(Error::Shape(_))));
        assert!(matches!(model.decode(&probe(1, 5, 1), DomainLabel::Target), Err(Error::Shape(_))));
    }

    #[test]
    fn table1_decode_shape() {
        let model = EditnetModel::new(ModelDims::TABLE1, ModelOptions::default(), 2);
        let y = model.decode(&probe(3, 128, 3), DomainLabel::Source).unwrap();
        assert_eq!(y.shape(), (3, 256));
        assert!(y.is_finite());
    }

    #[test]
    fn sampling_modes() {
        let mu = probe(4, 3, 4);
        let lv = probe(4, 3, 5);
        let mut rng = stream(9, Stream::Noise);
        let eval = sample_latent(&mu, &lv, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval.z, mu);
        let a = sample_latent(&mu, &lv, Mode::Train, &mut stream(9, Stream::Noise)).unwrap();
        let b = sample_latent(&mu, &lv, Mode::Train, &mut stream(9, Stream::Noise)).unwrap();
        assert_eq!(a, b);
        for i in 0..12 {
            let got = a.z.data()[i] - a.mu.data()[i];
            let want = libm::exp(0.5 * lv.data()[i]) * a.noise.data()[i];
            assert!((got - want).abs() <= 4.0 * f64::EPSILON * a.z.data()[i].abs().max(1.0));
        }
    }

    #[test]
    fn unit_variance_sampling_statistics() {
        let n = 10_000;
        let mu = Matrix::zeros(n, 1);
        let lv = Matrix::zeros(n, 1);
        let lat = sample_latent(&mu, &lv, Mode::Train, &mut stream(11, Stream::Noise)).unwrap();
        let mean = lat.z.sum() / n as f64;
        let var = lat.z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((libm::sqrt(var) - 1.0).abs() < 0.05);
    }

    #[test]
    fn source_output_ignores_target_batchnorm() {
        let mut model = small();
        let x = probe(5, 12, 6);
        let before = model.transfer(&x).unwrap();
        model.bn_tar.gamma.iter_mut().for_each(|g| *g *= 3.0);
        model.bn_tar.beta.iter_mut().for_each(|b| *b += 1.0);
        model.bn_tar.running_mean.iter_mut().for_each(|m| *m -= 2.0);
        assert_eq!(model.transfer(&x).unwrap(), before);
        let y = probe(5, 12, 7);
        let src = model.domain_bn(&y, DomainLabel::Source).unwrap();
        assert_eq!(src, model.bn_src.forward_eval(&y).unwrap());
    }

    #[test]
    fn domain_bn_train_centres_channels() {
        let mut model = small();
        let y = probe(8, 12, 8).map(|v| v * 2.0 + 5.0);
        let out = model.domain_bn_train(&y, DomainLabel::Target).unwrap();
        for m in out.col_means() {
            assert!(m.abs() < 1e-6);
        }
        assert_eq!(
            model.domain_bn_train(&probe(1, 12, 8), DomainLabel::Source),
            Err(Error::BatchTooSmall(1))
        );
    }

    #[test]
    fn equal_priors_make_shift_vanish() {
        let mut model = small();
        for j in 0..6 {
            let v = standard_normal(&mut stream(j as u64, Stream::Probe));
            model.prior_fc.weight.set(0, j, v);
            model.prior_fc.weight.set(1, j, v);
        }
        let z = probe(3, 6, 9);
        assert_eq!(model.shift_latent(&z).unwrap(), z);
        let x = probe(3, 12, 10);
        let (mu, _) = model.encode(&x, DomainLabel::Target).unwrap();
        let direct = model
            .domain_bn(&model.decode(&mu, DomainLabel::Source).unwrap(), DomainLabel::Source)
            .unwrap();
        assert_eq!(model.transfer(&x).unwrap(), direct);
    }

    #[test]
    fn global_prior_variant_has_zero_priors() {
        let opts = ModelOptions {
            prior_transfer: false,
            ..ModelOptions::default()
        };
        let model = EditnetModel::new(ModelDims::scaled(12, 6), opts, 5);
        assert_eq!(model.prior_mean(DomainLabel::Target), vec![0.0; 6]);
        assert_eq!(model.prior_mean(DomainLabel::Source), vec![0.0; 6]);
        let z = probe(2, 6, 3);
        assert_eq!(model.shift_latent(&z).unwrap(), z);
    }

    #[test]
    fn eval_forward_leaves_state_untouched() {
        let mut model = small();
        let x = probe(4, 12, 12);
        let mut rng = stream(1, Stream::Noise);
        let h = model.fingerprint();
        let a = model.transfer_with(&x, Mode::Eval, &mut rng).unwrap();
        let b = model.reconstruct_with(&x, DomainLabel::Target, Mode::Eval, &mut rng).unwrap();
        assert_eq!(model.fingerprint(), h);
        assert_eq!(model.transfer(&x).unwrap(), a);
        assert_eq!(b.shape(), (4, 12));
        model.transfer_with(&x, Mode::Train, &mut rng).unwrap();
        assert_ne!(model.fingerprint(), h);
    }

    #[test]
    fn state_round_trip() {
        let model = small();
        let mut values = Vec::new();
        model.visit_state("", &mut |_, v| values.push(v.to_vec()));
        let mut it = values.into_iter();
        let rebuilt = EditnetModel::from_state(model.dims(), model.options(), |_, dst| {
            dst.copy_from_slice(&it.next().unwrap());
            Ok(())
        })
        .unwrap();
        assert_eq!(rebuilt, model);
        assert_eq!(rebuilt.fingerprint(), model.fingerprint());
    }
}
