//! Statistics-based transfer: per-channel mean/std maps and CORAL.

use alloc::string::ToString;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;

pub const STD_FLOOR: f64 = 1e-8;
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Automatic ridge is this fraction of the average covariance eigenvalue.
pub const AUTO_RIDGE_SCALE: f64 = 1e-4;

/// Per-channel mean and (unbiased, floored) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: u64,
}

impl DomainStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, count: u64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(shape_err!("{} means with {} stds", mean.len(), std.len()));
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("domain stats"));
        }
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Invalid("std entries must be positive".to_string()));
        }
        Ok(Self { mean, std, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn compute_stats(x: &Matrix) -> Result<DomainStats> {
    compute_stats_with_floor(x, STD_FLOOR)
}

pub fn compute_stats_with_floor(x: &Matrix, floor: f64) -> Result<DomainStats> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    x.ensure_finite("stats input")?;
    let mean = x.col_means();
    let mut var = alloc::vec![0.0; x.cols()];
    for row in x.row_iter() {
        for ((v, m), xv) in var.iter_mut().zip(&mean).zip(row) {
            let d = xv - m;
            *v += d * d;
        }
    }
    let std = var
        .into_iter()
        .map(|v| libm::sqrt(v / (n - 1) as f64).max(floor))
        .collect();
    Ok(DomainStats {
        mean,
        std,
        count: n as u64,
    })
}

/// The per-channel affine transfer maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    /// `x − μ_tar`
    Center,
    /// `x − μ_tar + μ_src`
    CenterShift,
    /// `(x − μ_tar) / σ_tar`
    Standardize,
    /// `(x − μ_tar) / σ_tar · σ_src + μ_src`
    StandardizeRecolor,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::Center,
        BaselineKind::CenterShift,
        BaselineKind::Standardize,
        BaselineKind::StandardizeRecolor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Center => "center",
            BaselineKind::CenterShift => "center_shift",
            BaselineKind::Standardize => "standardize",
            BaselineKind::StandardizeRecolor => "standardize_recolor",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Invalid(alloc::format!("unknown baseline `{s}`")))
    }
}

pub fn baseline_transfer(
    kind: BaselineKind,
    x: &Matrix,
    tar: &DomainStats,
    src: &DomainStats,
) -> Result<Matrix> {
    if tar.dim() != x.cols() || src.dim() != x.cols() {
        return Err(shape_err!(
            "baseline on {} columns with stats of dim {}/{}",
            x.cols(),
            tar.dim(),
            src.dim()
        ));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            let centred = *v - tar.mean[c];
            *v = match kind {
                BaselineKind::Center => centred,
                BaselineKind::CenterShift => centred + src.mean[c],
                BaselineKind::Standardize => centred / tar.std[c],
                BaselineKind::StandardizeRecolor => centred / tar.std[c] * src.std[c] + src.mean[c],
            };
        }
    }
    Ok(out)
}

/// Unbiased covariance (divisor N−1) and the column means.
pub fn covariance(x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::TooFewRows { needed: 2, got: n });
    }
    x.ensure_finite("covariance input")?;
    let mean = x.col_means();
    let mut centred = x.clone();
    for r in 0..n {
        for (v, m) in centred.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = centred.t_matmul(&centred)?.map(|v| v / (n - 1) as f64);
    Ok((cov, mean))
}

/// Ridge added to each covariance before taking matrix square roots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `AUTO_RIDGE_SCALE · trace(Cov) / D`, per domain.
    Auto,
    Fixed(f64),
}

impl Ridge {
    fn resolve(self, cov: &Matrix) -> f64 {
        match self {
            Ridge::Fixed(r) => r,
            Ridge::Auto => {
                let d = cov.rows();
                let trace: f64 = (0..d).map(|i| cov.get(i, i)).sum();
                AUTO_RIDGE_SCALE * trace / d as f64
            }
        }
    }
}

/// `(M + ridge·I)^{+1/2}` and `(M + ridge·I)^{−1/2}` for symmetric `M`,
/// eigenvalues floored at [`EIGEN_FLOOR`].
pub fn symmetric_sqrt_pair(m: &Matrix, ridge: f64) -> Result<(Matrix, Matrix)> {
    let d = m.rows();
    if m.cols() != d {
        return Err(shape_err!("square root of a {}x{} matrix", d, m.cols()));
    }
    m.ensure_finite("symmetric matrix")?;
    let mut dm = DMatrix::from_row_slice(d, d, m.data());
    for i in 0..d {
        dm[(i, i)] += ridge;
    }
    let eig = dm.symmetric_eigen();
    let vecs = &eig.eigenvectors;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(EIGEN_FLOOR)).collect();
    if lam.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("eigendecomposition"));
    }
    let build = |power: f64| {
        let mut out = Matrix::zeros(d, d);
        for k in 0..d {
            let s = libm::pow(lam[k], power);
            for i in 0..d {
                let vi = vecs[(i, k)] * s;
                if vi == 0.0 {
                    continue;
                }
                let row = out.row_mut(i);
                for j in 0..d {
                    row[j] += vi * vecs[(j, k)];
                }
            }
        }
        out
    };
    Ok((build(0.5), build(-0.5)))
}

/// CORAL target → source map `x ↦ (x − μ_tar)·W·C + μ_src` with whitening
/// `W = (Cov_tar + λI)^{−1/2}` and coloring `C = (Cov_src + λI)^{1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoralTransform {
    pub whitening: Matrix,
    pub coloring: Matrix,
    pub target_mean: Vec<f64>,
    pub source_mean: Vec<f64>,
    /// When false the map is purely linear (no mean subtraction or shift).
    pub align_means: bool,
}

impl CoralTransform {
    pub fn dim(&self) -> usize {
        self.whitening.rows()
    }

    /// `W·C`, the linear part of the map.
    pub fn linear_part(&self) -> Matrix {
        self.whitening.matmul(&self.coloring).expect("square matrices of equal size")
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        apply_coral(self, x)
    }
}

/// Fits CORAL from training sets of both domains.
pub fn fit_coral(tar_train: &Matrix, src_train: &Matrix, ridge: Ridge) -> Result<CoralTransform> {
    if tar_train.cols() != src_train.cols() {
        return Err(shape_err!(
            "CORAL on {} vs {} columns",
            tar_train.cols(),
            src_train.cols()
        ));
    }
    let (cov_t, mean_t) = covariance(tar_train)?;
    let (cov_s, mean_s) = covariance(src_train)?;
    let (_, whitening) = symmetric_sqrt_pair(&cov_t, ridge.resolve(&cov_t))?;
    let (coloring, _) = symmetric_sqrt_pair(&cov_s, ridge.resolve(&cov_s))?;
    Ok(CoralTransform {
        whitening,
        coloring,
        target_mean: mean_t,
        source_mean: mean_s,
        align_means: true,
    })
}

pub fn apply_coral(t: &CoralTransform, x: &Matrix) -> Result<Matrix> {
    if x.cols() != t.dim() {
        return Err(shape_err!("CORAL of dim {} on {} columns", t.dim(), x.cols()));
    }
    let mut centred = x.clone();
    if t.align_means {
        for r in 0..centred.rows() {
            for (v, m) in centred.row_mut(r).iter_mut().zip(&t.target_mean) {
                *v -= m;
            }
        }
    }
    let mut out = centred.matmul(&t.linear_part())?;
    if t.align_means {
        out.add_row_vector(&t.source_mean)?;
    }
    Ok(out)
}
