//! Central finite-difference check of the full training objective against
//! the analytic gradients, on a small randomly parameterized model.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::cvae::{EditnetModel, ModelDims, ModelOptions};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::nn::Module;
use crate::objective::{step_parts, step_parts_traced, StepNoise, StepParts, TermMask};
use crate::rng::{normal_matrix, standard_normal, stream, Stream};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const REL_FLOOR: f64 = 1e-8;

/// Some parameters only add a per-column constant in front of a train-mode
/// batch norm (`dec.bn2.beta`, `dec.out.bias`, and label columns feeding
/// units that are active on every row). Their exact gradient is zero and
/// their finite difference is loss roundoff over 2h, so an analytic
/// gradient below this bound is held to an absolute bound on the finite
/// difference instead of the relative one.
pub const INERT_ANALYTIC_BOUND: f64 = 1e-12;
pub const INERT_NUMERIC_BOUND: f64 = 1e-9;

/// `|a − f| / max(|a|, |f|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub x_dim: usize,
    pub z_dim: usize,
    pub batch: usize,
    pub step: f64,
    pub tolerance: f64,
    pub prior_transfer: bool,
    /// Adds this to one analytic gradient entry before comparing. Used to
    /// confirm that the check can fail.
    pub inject_fault: Option<f64>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            x_dim: 12,
            z_dim: 6,
            batch: 16,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            prior_transfer: true,
            inject_fault: None,
        }
    }
}

/// Worst disagreement for one loss term (or the total).
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Analytic and numeric values at the worst parameter.
    pub worst_pair: (f64, f64),
    pub n_params: usize,
    /// Parameters whose ±h perturbation crosses a ReLU, clamp or penalty
    /// kink, where a central difference does not estimate the derivative.
    pub kink_skipped: usize,
    pub n_inert: usize,
    /// Largest |analytic| and |numeric| over the inert parameters.
    pub inert_max: (f64, f64),
}

impl ComponentResult {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
            && self.inert_max.0 <= INERT_ANALYTIC_BOUND
            && self.inert_max.1 <= INERT_NUMERIC_BOUND
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub components: Vec<ComponentResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.components.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed(self.tolerance))
    }
}

struct Problem {
    model: EditnetModel,
    x_tar: Matrix,
    x_src: Matrix,
    noise: StepNoise,
}

/// Random weights, biases and batch-norm affine parameters.
fn random_problem(cfg: &GradcheckConfig) -> Problem {
    let opts = ModelOptions {
        prior_transfer: cfg.prior_transfer,
        ..ModelOptions::default()
    };
    let mut model = EditnetModel::new(ModelDims::scaled(cfg.x_dim, cfg.z_dim), opts, cfg.seed);
    let mut rng = stream(cfg.seed, Stream::Probe);
    model.visit_params("", &mut |name, p, _| {
        if name.ends_with("gamma") {
            p.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if name.ends_with("bias") || name.ends_with("beta") {
            p.iter_mut().for_each(|v| *v = 0.1 * standard_normal(&mut rng));
        }
    });
    let x_tar = normal_matrix(cfg.batch, cfg.x_dim, &mut rng);
    let x_src = normal_matrix(cfg.batch, cfg.x_dim, &mut rng).map(|v| 0.5 * v + 0.3);
    let noise = StepNoise {
        target: normal_matrix(cfg.batch, cfg.z_dim, &mut rng),
        source: normal_matrix(cfg.batch, cfg.z_dim, &mut rng),
    };
    Problem {
        model,
        x_tar,
        x_src,
        noise,
    }
}

fn masked_value(p: &StepParts, mask: TermMask) -> f64 {
    let mut v = 0.0;
    if mask.rec {
        v += p.rec[0] + p.rec[1];
    }
    if mask.kl {
        v += p.kl[0] + p.kl[1];
    }
    if mask.cos {
        v += p.cos;
    }
    v
}

fn flat_params(model: &mut EditnetModel) -> (Vec<String>, Vec<f64>) {
    let mut names = Vec::new();
    let mut grads = Vec::new();
    model.visit_params("", &mut |name, p, g| {
        for i in 0..p.len() {
            names.push(alloc::format!("{name}[{i}]"));
        }
        grads.extend_from_slice(g);
    });
    (names, grads)
}

fn perturbed(model: &EditnetModel, k: usize, delta: f64) -> EditnetModel {
    let mut m = model.clone();
    let mut offset = 0;
    m.visit_params("", &mut |_, p, _| {
        if (offset..offset + p.len()).contains(&k) {
            p[k - offset] += delta;
        }
        offset += p.len();
    });
    m
}

fn check_component(
    problem: &Problem,
    component: &'static str,
    mask: TermMask,
    cfg: &GradcheckConfig,
) -> Result<ComponentResult> {
    let Problem {
        model,
        x_tar,
        x_src,
        noise,
    } = problem;
    let mut probe = model.clone();
    probe.zero_grad();
    step_parts(&mut probe, x_tar, x_src, noise, mask, true)?;
    let (names, mut analytic) = flat_params(&mut probe);
    if let Some(fault) = cfg.inject_fault {
        let k = analytic.len() / 2;
        analytic[k] += fault;
    }

    let value = |m: &EditnetModel| -> Result<(f64, Vec<bool>)> {
        let mut m = m.clone();
        let mut branches = Vec::new();
        let parts = step_parts_traced(&mut m, x_tar, x_src, noise, mask, false, Some(&mut branches))?;
        Ok((masked_value(&parts, mask), branches))
    };
    let base = value(model)?.1;
    let h = cfg.step;
    let mut worst = (0.0, 0usize, (0.0, 0.0));
    let mut kinks = 0;
    let (mut n_inert, mut inert_max) = (0, (0.0f64, 0.0f64));
    for (k, &a) in analytic.iter().enumerate() {
        let (plus, bp) = value(&perturbed(model, k, h))?;
        let (minus, bm) = value(&perturbed(model, k, -h))?;
        if bp != base || bm != base {
            kinks += 1;
            continue;
        }
        let f = (plus - minus) / (2.0 * h);
        if a.abs() <= INERT_ANALYTIC_BOUND {
            n_inert += 1;
            inert_max = (inert_max.0.max(a.abs()), inert_max.1.max(f.abs()));
            continue;
        }
        let e = relative_error(a, f);
        if e > worst.0 {
            worst = (e, k, (a, f));
        }
    }
    Ok(ComponentResult {
        component,
        max_rel_error: worst.0,
        worst_param: names[worst.1].clone(),
        worst_pair: worst.2,
        n_params: analytic.len(),
        kink_skipped: kinks,
        n_inert,
        inert_max,
    })
}

/// Checks `rec`, `kl` and `cos` separately and then their sum.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let problem = random_problem(cfg);
    let none = TermMask {
        rec: false,
        kl: false,
        cos: false,
    };
    let checks = [
        ("rec", TermMask { rec: true, ..none }),
        ("kl", TermMask { kl: true, ..none }),
        ("cos", TermMask { cos: true, ..none }),
        ("total", TermMask::ALL),
    ];
    let components = checks
        .into_iter()
        .map(|(name, mask)| check_component(&problem, name, mask, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradcheckReport {
        components,
        tolerance: cfg.tolerance,
    })
}
