//! One training step of the CVAE: forward through both domains and the
//! transfer path, total loss, and exact gradients into the model.

use alloc::vec::Vec;

use crate::cvae::{latent_with_noise, DomainLabel, EditnetModel};
use crate::error::Result;
use crate::losses::{
    cosine, loss_cos_batch, loss_cos_batch_grad, loss_kl, loss_kl_grad, loss_rec, loss_rec_grad,
    LossBreakdown, COS_FLOOR,
};
use crate::matrix::Matrix;

/// Which loss terms enter the total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    pub cosine: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self { cosine: true }
    }
}

/// Standard-normal draws for the reparameterization of both domains.
#[derive(Clone, Debug, PartialEq)]
pub struct StepNoise {
    pub target: Matrix,
    pub source: Matrix,
}

/// Loss components kept separately, for gradient checking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParts {
    pub rec: [f64; 2],
    pub kl: [f64; 2],
    pub cos: f64,
}

/// Which terms to backpropagate; lets each term be checked on its own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TermMask {
    pub rec: bool,
    pub kl: bool,
    pub cos: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        rec: true,
        kl: true,
        cos: true,
    };
}

fn sum_rows(m: &Matrix) -> Vec<f64> {
    m.col_sums()
}

/// Runs the forward pass in train mode on one target batch and one source
/// batch (both pre-normalized) and, when `backward` is set, accumulates the
/// gradient of the total loss into the model.
///
/// The same latent draw of each target row feeds both its reconstruction
/// and its transfer. Batch-norm layers see each path as its own batch.
pub fn train_step(
    model: &mut EditnetModel,
    x_tar: &Matrix,
    x_src: &Matrix,
    noise: &StepNoise,
    opts: LossOptions,
    backward: bool,
) -> Result<LossBreakdown> {
    let mask = TermMask {
        cos: opts.cosine,
        ..TermMask::ALL
    };
    let parts = step_parts(model, x_tar, x_src, noise, mask, backward)?;
    Ok(LossBreakdown::from_parts(parts.rec, parts.kl, parts.cos, opts.cosine))
}

/// Forward pass returning each loss term; backpropagates the terms in `mask`.
pub fn step_parts(
    model: &mut EditnetModel,
    x_tar: &Matrix,
    x_src: &Matrix,
    noise: &StepNoise,
    mask: TermMask,
    backward: bool,
) -> Result<StepParts> {
    step_parts_traced(model, x_tar, x_src, noise, mask, backward, None)
}

/// As [`step_parts`], also recording every piecewise branch taken (ReLU
/// activity, clamp activity, cosine penalty regime). Finite differences are
/// only meaningful when a perturbation leaves this pattern unchanged.
pub fn step_parts_traced(
    model: &mut EditnetModel,
    x_tar: &Matrix,
    x_src: &Matrix,
    noise: &StepNoise,
    mask: TermMask,
    backward: bool,
    branches: Option<&mut Vec<bool>>,
) -> Result<StepParts> {
    use DomainLabel::{Source, Target};

    let p_tar = model.prior_mean(Target);
    let p_src = model.prior_mean(Source);

    let enc_t = model.encode_train(x_tar, Target)?;
    let enc_s = model.encode_train(x_src, Source)?;
    let lat_t = latent_with_noise(&enc_t.mu, &enc_t.log_var, noise.target.clone())?;
    let lat_s = latent_with_noise(&enc_s.mu, &enc_s.log_var, noise.source.clone())?;

    let dec_t = model.decode_train(&lat_t.z, Target)?;
    let (xh_t, bn_t) = model.domain_bn_forward_train(&dec_t.out, Target)?;
    let dec_s = model.decode_train(&lat_s.z, Source)?;
    let (xh_s, bn_s) = model.domain_bn_forward_train(&dec_s.out, Source)?;

    let z_shift = model.shift_latent(&lat_t.z)?;
    let dec_x = model.decode_train(&z_shift, Source)?;
    let (x_tilde, bn_x) = model.domain_bn_forward_train(&dec_x.out, Source)?;

    if let Some(out) = branches {
        let clamp = model.options().log_var_clamp;
        enc_t.branches(clamp, out);
        enc_s.branches(clamp, out);
        for d in [&dec_t, &dec_s, &dec_x] {
            d.branches(out);
        }
        for i in 0..x_tilde.rows() {
            let a = x_tilde.row(i);
            let others = (i + 1..x_tilde.rows()).map(|j| x_tilde.row(j));
            for b in others.chain(x_src.row_iter()) {
                let c = cosine(a, b)?;
                out.push(c > 0.0);
                out.push(1.0 - c > COS_FLOOR);
            }
        }
    }

    let parts = StepParts {
        rec: [loss_rec(x_tar, &xh_t)?, loss_rec(x_src, &xh_s)?],
        kl: [
            loss_kl(&enc_t.mu, &enc_t.log_var, &p_tar)?,
            loss_kl(&enc_s.mu, &enc_s.log_var, &p_src)?,
        ],
        cos: loss_cos_batch(&x_tilde, x_src)?,
    };
    if !backward {
        return Ok(parts);
    }

    let (rows_t, rows_s) = (x_tar.rows(), x_src.rows());
    let zdim = model.dims().z_dim;
    let mut dz_t = Matrix::zeros(rows_t, zdim);
    let mut dz_s = Matrix::zeros(rows_s, zdim);
    let mut dp_tar = alloc::vec![0.0; zdim];
    let mut dp_src = alloc::vec![0.0; zdim];

    if mask.rec {
        let g = model.domain_bn_backward(Target, &bn_t, &loss_rec_grad(x_tar, &xh_t)?)?;
        dz_t.add_assign(&model.decode_backward(&dec_t, &g)?)?;
        let g = model.domain_bn_backward(Source, &bn_s, &loss_rec_grad(x_src, &xh_s)?)?;
        dz_s.add_assign(&model.decode_backward(&dec_s, &g)?)?;
    }

    if mask.cos {
        let g = loss_cos_batch_grad(&x_tilde, x_src)?;
        let g = model.domain_bn_backward(Source, &bn_x, &g)?;
        let dz_shift = model.decode_backward(&dec_x, &g)?;
        if model.prior_transfer() {
            for (j, s) in sum_rows(&dz_shift).into_iter().enumerate() {
                dp_tar[j] -= s;
                dp_src[j] += s;
            }
        }
        dz_t.add_assign(&dz_shift)?;
    }

    let (mut dmu_t, mut dlv_t, mut dmu_s, mut dlv_s) = (
        Matrix::zeros(rows_t, zdim),
        Matrix::zeros(rows_t, zdim),
        Matrix::zeros(rows_s, zdim),
        Matrix::zeros(rows_s, zdim),
    );
    if mask.kl {
        let (a, b, p) = loss_kl_grad(&enc_t.mu, &enc_t.log_var, &p_tar)?;
        dmu_t = a;
        dlv_t = b;
        dp_tar.iter_mut().zip(p).for_each(|(d, v)| *d += v);
        let (a, b, p) = loss_kl_grad(&enc_s.mu, &enc_s.log_var, &p_src)?;
        dmu_s = a;
        dlv_s = b;
        dp_src.iter_mut().zip(p).for_each(|(d, v)| *d += v);
    }

    // z = μ + exp(log σ² / 2) ⊙ ε
    for (dz, lat, dmu, dlv) in [
        (&dz_t, &lat_t, &mut dmu_t, &mut dlv_t),
        (&dz_s, &lat_s, &mut dmu_s, &mut dlv_s),
    ] {
        dmu.add_assign(dz)?;
        for i in 0..dz.data().len() {
            let sigma = libm::exp(0.5 * lat.log_var.data()[i]);
            dlv.data_mut()[i] += dz.data()[i] * lat.noise.data()[i] * 0.5 * sigma;
        }
    }

    model.encode_backward(&enc_t, &dmu_t, &dlv_t)?;
    model.encode_backward(&enc_s, &dmu_s, &dlv_s)?;
    model.prior_backward(Target, &dp_tar)?;
    model.prior_backward(Source, &dp_src)?;
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvae::{ModelDims, ModelOptions};
    use crate::rng::{normal_matrix, stream, Stream};

    fn setup(prior_transfer: bool) -> (EditnetModel, Matrix, Matrix, StepNoise) {
        let opts = ModelOptions {
            prior_transfer,
            ..ModelOptions::default()
        };
        let model = EditnetModel::new(ModelDims::scaled(8, 4), opts, 3);
        let mut rng = stream(4, Stream::Probe);
        let xt = normal_matrix(5, 8, &mut rng);
        let xs = normal_matrix(4, 8, &mut rng);
        let noise = StepNoise {
            target: normal_matrix(5, 4, &mut rng),
            source: normal_matrix(4, 4, &mut rng),
        };
        (model, xt, xs, noise)
    }

    #[test]
    fn total_is_sum_of_recomputed_parts() {
        let (mut model, xt, xs, noise) = setup(true);
        let loss = train_step(&mut model, &xt, &xs, &noise, LossOptions::default(), false).unwrap();
        let parts = step_parts(&mut model, &xt, &xs, &noise, TermMask::ALL, false).unwrap();
        assert_eq!(loss.loss_rec, parts.rec[0] + parts.rec[1]);
        assert_eq!(loss.loss_kl, parts.kl[0] + parts.kl[1]);
        assert_eq!(loss.total, loss.loss_rec + loss.loss_kl + parts.cos);
        assert!(loss.loss_rec >= 0.0 && loss.loss_kl >= 0.0 && loss.loss_cos >= 0.0);

        let off = LossOptions { cosine: false };
        let loss = train_step(&mut model, &xt, &xs, &noise, off, false).unwrap();
        assert_eq!(loss.loss_cos, 0.0);
        assert_eq!(loss.total, loss.loss_rec + loss.loss_kl);
    }
}
