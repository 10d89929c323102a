//! Training losses: reconstruction, conditional KL and cosine repulsion.
//!
//! Each loss has a value function and a gradient function; gradients are
//! with respect to the differentiable inputs and already include the mean
//! reduction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

/// Floor applied to `1 − cos` before the logarithm of the cosine loss.
pub const COS_FLOOR: f64 = 1e-7;

/// Per-step loss values. `total` is the unit-weight sum of the parts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loss_rec: f64,
    pub loss_kl: f64,
    pub loss_cos: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(loss_rec: f64, loss_kl: f64, loss_cos: f64) -> Self {
        Self {
            loss_rec,
            loss_kl,
            loss_cos,
            total: loss_rec + loss_kl + loss_cos,
        }
    }

    /// Sums reconstruction and KL over both domains; the cosine term is
    /// dropped when `cosine` is off.
    pub fn from_parts(rec: [f64; 2], kl: [f64; 2], cos: f64, cosine: bool) -> Self {
        Self::new(rec[0] + rec[1], kl[0] + kl[1], if cosine { cos } else { 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        self.loss_rec.is_finite()
            && self.loss_kl.is_finite()
            && self.loss_cos.is_finite()
            && self.total.is_finite()
    }
}

/// `(1/N) Σₙ ‖xₙ − x̂ₙ‖²`
pub fn loss_rec(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    x.same_shape(x_hat, "loss_rec")?;
    let n = x.rows().max(1) as f64;
    let sq: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / n)
}

/// Gradient of [`loss_rec`] with respect to `x_hat`.
pub fn loss_rec_grad(x: &Matrix, x_hat: &Matrix) -> Result<Matrix> {
    let n = x.rows().max(1) as f64;
    x_hat.zip_map(x, |h, v| 2.0 * (h - v) / n)
}

/// KL(N(μ, σ²) ‖ N(prior, I)) summed over latent dimensions and averaged
/// over the batch:
/// `−(1/N) Σₙ ½ Σⱼ (1 + log σ²ₙⱼ − (μₙⱼ − priorⱼ)² − σ²ₙⱼ)`.
pub fn loss_kl(mu: &Matrix, log_var: &Matrix, prior: &[f64]) -> Result<f64> {
    mu.same_shape(log_var, "loss_kl")?;
    if prior.len() != mu.cols() {
        return Err(shape_err!("prior of {} for {} latent dims", prior.len(), mu.cols()));
    }
    let n = mu.rows().max(1) as f64;
    let mut acc = 0.0;
    for r in 0..mu.rows() {
        for ((&m, &lv), &p) in mu.row(r).iter().zip(log_var.row(r)).zip(prior) {
            let d = m - p;
            acc += 1.0 + lv - d * d - libm::exp(lv);
        }
    }
    Ok(-0.5 * acc / n)
}

/// Gradients of [`loss_kl`]: `(d/dμ, d/dlog σ², d/dprior)`.
pub fn loss_kl_grad(mu: &Matrix, log_var: &Matrix, prior: &[f64]) -> Result<(Matrix, Matrix, Vec<f64>)> {
    mu.same_shape(log_var, "loss_kl")?;
    if prior.len() != mu.cols() {
        return Err(shape_err!("prior of {} for {} latent dims", prior.len(), mu.cols()));
    }
    let n = mu.rows().max(1) as f64;
    let mut dmu = mu.clone();
    let mut dprior = vec![0.0; prior.len()];
    for r in 0..mu.rows() {
        for (j, v) in dmu.row_mut(r).iter_mut().enumerate() {
            let d = (*v - prior[j]) / n;
            *v = d;
            dprior[j] -= d;
        }
    }
    let dlv = log_var.map(|lv| 0.5 * (libm::exp(lv) - 1.0) / n);
    Ok((dmu, dlv, dprior))
}

fn norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|a| a * a).sum())
}

/// Cosine similarity; errors on a zero-norm argument.
pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(shape_err!("cosine of lengths {} and {}", x.len(), y.len()));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroNorm("cosine"));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(dot / (nx * ny))
}

/// `relu(−log(clamp(1 − c, COS_FLOOR, 2)))` for a cosine value `c`.
pub fn cos_penalty(c: f64) -> f64 {
    let u = (1.0 - c).clamp(COS_FLOOR, 2.0);
    (-libm::log(u)).max(0.0)
}

/// Derivative of [`cos_penalty`] in `c`; zero wherever the clamp or the
/// relu is inactive.
pub fn cos_penalty_grad(c: f64) -> f64 {
    let u = 1.0 - c;
    if c > 0.0 && u > COS_FLOOR {
        1.0 / u
    } else {
        0.0
    }
}

/// Cosine repulsion between two embeddings. Positive only when their angle
/// is below 90°.
pub fn loss_cos_pair(x: &[f64], y: &[f64]) -> Result<f64> {
    cosine(x, y).map(cos_penalty)
}

fn unit_rows(m: &Matrix, what: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let mut unit = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let n = norm(m.row(r));
        if n == 0.0 {
            return Err(Error::ZeroNorm(what));
        }
        unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((unit, norms))
}

fn pair_count(n_tar: usize, n_src: usize) -> usize {
    n_tar * n_tar.saturating_sub(1) / 2 + n_tar * n_src
}

fn check_batch(x_tilde: &Matrix, x_src: &Matrix) -> Result<usize> {
    if x_src.rows() > 0 && x_src.cols() != x_tilde.cols() {
        return Err(shape_err!(
            "cosine batch: {} vs {} columns",
            x_tilde.cols(),
            x_src.cols()
        ));
    }
    let pairs = pair_count(x_tilde.rows(), x_src.rows());
    if pairs == 0 {
        return Err(Error::Invalid("cosine batch has no pairs".into()));
    }
    Ok(pairs)
}

/// Mean cosine repulsion over every unordered pair of distinct transferred
/// rows plus every (transferred, source) pair.
pub fn loss_cos_batch(x_tilde: &Matrix, x_src: &Matrix) -> Result<f64> {
    let pairs = check_batch(x_tilde, x_src)?;
    let (ut, _) = unit_rows(x_tilde, "transferred batch")?;
    let (us, _) = unit_rows(x_src, "source batch")?;
    let within = ut.matmul_t(&ut)?;
    let mut acc = 0.0;
    for i in 0..ut.rows() {
        for j in i + 1..ut.rows() {
            acc += cos_penalty(within.get(i, j));
        }
    }
    if us.rows() > 0 {
        let cross = ut.matmul_t(&us)?;
        acc += cross.data().iter().map(|&c| cos_penalty(c)).sum::<f64>();
    }
    Ok(acc / pairs as f64)
}

/// Gradient of [`loss_cos_batch`] with respect to the transferred rows.
/// Source rows are data and receive no gradient.
pub fn loss_cos_batch_grad(x_tilde: &Matrix, x_src: &Matrix) -> Result<Matrix> {
    let pairs = check_batch(x_tilde, x_src)? as f64;
    let (ut, norms) = unit_rows(x_tilde, "transferred batch")?;
    let (us, _) = unit_rows(x_src, "source batch")?;

    // Gradient with respect to the unit rows first.
    let mut weights = ut.matmul_t(&ut)?;
    for i in 0..weights.rows() {
        for j in 0..weights.cols() {
            let w = if i == j { 0.0 } else { cos_penalty_grad(weights.get(i, j)) / pairs };
            weights.set(i, j, w);
        }
    }
    let mut dunit = weights.matmul(&ut)?;
    if us.rows() > 0 {
        let cross = ut.matmul_t(&us)?.map(|c| cos_penalty_grad(c) / pairs);
        dunit.add_assign(&cross.matmul(&us)?)?;
    }

    // Project out the radial component and undo the normalization.
    let mut dx = dunit;
    for r in 0..dx.rows() {
        let u = ut.row(r);
        let radial: f64 = dx.row(r).iter().zip(u).map(|(g, v)| g * v).sum();
        let n = norms[r];
        for (g, v) in dx.row_mut(r).iter_mut().zip(u) {
            *g = (*g - radial * v) / n;
        }
    }
    Ok(dx)
}
