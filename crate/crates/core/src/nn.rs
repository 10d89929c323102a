//! Dense layers, batch-norm and activations with explicit backward passes.
//!
//! Forward passes are pure (or only touch batch-norm running statistics in
//! train mode); anything backward needs is returned to the caller as a cache,
//! so one layer can take part in several forward paths per step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::matrix::Matrix;
use crate::rng::standard_normal;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Visitor over named parameter tensors and their gradients.
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut [f64], &mut [f64]) + 'a;

/// Something holding trainable parameters and (optionally) buffers.
pub trait Module {
    /// Visits every trainable parameter with its gradient buffer.
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>);

    /// Visits parameters and non-trainable buffers in a fixed order.
    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |_, _, g| g.iter_mut().for_each(|v| *v = 0.0));
    }
}

/// Fully connected layer, `y = x·W + b` with `W` stored in × out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    grad_weight: Matrix,
    grad_bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(shape_err!(
                "bias of {} for {}x{} weight",
                bias.len(),
                weight.rows(),
                weight.cols()
            ));
        }
        let grad_weight = Matrix::zeros(weight.rows(), weight.cols());
        let grad_bias = vec![0.0; bias.len()];
        Ok(Self {
            weight,
            bias,
            grad_weight,
            grad_bias,
        })
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self::new(Matrix::zeros(input, output), vec![0.0; output]).expect("consistent shapes")
    }

    /// Normal(0, 2/fan_in) weights, zero bias. For layers feeding a ReLU.
    pub fn init_he<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let std = libm::sqrt(2.0 / input as f64);
        let w = Matrix::from_fn(input, output, |_, _| std * standard_normal(rng));
        Self::new(w, vec![0.0; output]).expect("consistent shapes")
    }

    /// Uniform(±1/sqrt(fan_in)) weights, zero bias.
    pub fn init_uniform<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / libm::sqrt(input as f64);
        let w = Matrix::from_fn(input, output, |_, _| rng.gen_range(-bound..bound));
        Self::new(w, vec![0.0; output]).expect("consistent shapes")
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn grad_weight(&self) -> &Matrix {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(shape_err!(
                "linear {}->{} given {} columns",
                self.in_dim(),
                self.out_dim(),
                x.cols()
            ));
        }
        x.ensure_finite("linear input")?;
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias)?;
        Ok(y)
    }

    /// Accumulates parameter gradients for input `x` and upstream `dy`,
    /// returning the gradient with respect to `x`.
    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        if x.rows() != dy.rows() || x.cols() != self.in_dim() || dy.cols() != self.out_dim() {
            return Err(shape_err!(
                "linear backward: x {:?}, dy {:?}, layer {}->{}",
                x.shape(),
                dy.shape(),
                self.in_dim(),
                self.out_dim()
            ));
        }
        let gw = x.t_matmul(dy)?;
        self.grad_weight.add_assign(&gw)?;
        for (g, s) in self.grad_bias.iter_mut().zip(dy.col_sums()) {
            *g += s;
        }
        dy.matmul_t(&self.weight)
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}weight"), self.weight.data_mut(), self.grad_weight.data_mut());
        f(&format!("{prefix}bias"), &mut self.bias, &mut self.grad_bias);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}weight"), self.weight.data());
        f(&format!("{prefix}bias"), &self.bias);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}weight"), self.weight.data_mut());
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

/// Batch normalization over the rows of a batch.
///
/// Train mode normalizes with the biased batch variance and folds it into
/// the running statistics; eval mode uses the running statistics only.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    grad_gamma: Vec<f64>,
    grad_beta: Vec<f64>,
}

/// What a train-mode batch-norm forward leaves for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(width: usize) -> Self {
        Self::with_constants(width, BN_MOMENTUM, BN_EPSILON)
    }

    pub fn with_constants(width: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum,
            epsilon,
            grad_gamma: vec![0.0; width],
            grad_beta: vec![0.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    pub fn grad_gamma(&self) -> &[f64] {
        &self.grad_gamma
    }

    pub fn grad_beta(&self) -> &[f64] {
        &self.grad_beta
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.width() {
            return Err(shape_err!(
                "batch-norm of width {} given {} columns",
                self.width(),
                x.cols()
            ));
        }
        x.ensure_finite("batch-norm input")
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix> {
        match mode {
            Mode::Train => self.forward_train(x).map(|(y, _)| y),
            Mode::Eval => self.forward_eval(x),
        }
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, BatchNormCache)> {
        self.check_input(x)?;
        let n = x.rows();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let mean = x.col_means();
        let mut var = vec![0.0; self.width()];
        for row in x.row_iter() {
            for ((v, &m), &xv) in var.iter_mut().zip(&mean).zip(row) {
                let d = xv - m;
                *v += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n as f64);
        let inv_std: Vec<f64> = var
            .iter()
            .map(|&v| 1.0 / libm::sqrt(v + self.epsilon))
            .collect();

        let mut x_hat = x.clone();
        for r in 0..n {
            for (c, v) in x_hat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - mean[c]) * inv_std[c];
            }
        }
        let y = self.affine(&x_hat);

        let m = self.momentum;
        for c in 0..self.width() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
        Ok((y, BatchNormCache { x_hat, inv_std }))
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut x_hat = x.clone();
        for r in 0..x.rows() {
            for (c, v) in x_hat.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.running_mean[c]) / libm::sqrt(self.running_var[c] + self.epsilon);
            }
        }
        Ok(self.affine(&x_hat))
    }

    fn affine(&self, x_hat: &Matrix) -> Matrix {
        let mut y = x_hat.clone();
        for r in 0..y.rows() {
            for (c, v) in y.row_mut(r).iter_mut().enumerate() {
                *v = self.gamma[c] * *v + self.beta[c];
            }
        }
        y
    }

    /// Train-mode backward, including the path through the batch statistics.
    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Matrix) -> Result<Matrix> {
        let x_hat = &cache.x_hat;
        x_hat.same_shape(dy, "batch-norm backward")?;
        let n = dy.rows() as f64;
        let width = self.width();
        let mut sum_dy = vec![0.0; width];
        let mut sum_dy_xhat = vec![0.0; width];
        for r in 0..dy.rows() {
            for c in 0..width {
                let g = dy.get(r, c);
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * x_hat.get(r, c);
            }
        }
        for c in 0..width {
            self.grad_gamma[c] += sum_dy_xhat[c];
            self.grad_beta[c] += sum_dy[c];
        }
        let mut dx = dy.clone();
        for r in 0..dy.rows() {
            for (c, v) in dx.row_mut(r).iter_mut().enumerate() {
                let scale = self.gamma[c] * cache.inv_std[c] / n;
                *v = scale * (n * *v - sum_dy[c] - x_hat.get(r, c) * sum_dy_xhat[c]);
            }
        }
        Ok(dx)
    }
}

impl Module for BatchNorm {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}gamma"), &mut self.gamma, &mut self.grad_gamma);
        f(&format!("{prefix}beta"), &mut self.beta, &mut self.grad_beta);
    }

    fn visit_state(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&format!("{prefix}gamma"), &self.gamma);
        f(&format!("{prefix}beta"), &self.beta);
        f(&format!("{prefix}running_mean"), &self.running_mean);
        f(&format!("{prefix}running_var"), &self.running_var);
    }

    fn visit_state_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => libm::tanh(v),
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// Gradient with respect to the input, computed from the forward output.
    pub fn backward(self, output: &Matrix, dy: &Matrix) -> Result<Matrix> {
        match self {
            Activation::Relu => output.zip_map(dy, |y, g| if y > 0.0 { g } else { 0.0 }),
            Activation::Tanh => output.zip_map(dy, |y, g| (1.0 - y * y) * g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream, Stream};

    fn rel_err(a: f64, f: f64) -> f64 {
        (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
    }

    #[test]
    fn linear_hand_cases() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let layer = Linear::new(Matrix::from_rows(&[[3.0], [4.0]]).unwrap(), vec![5.0]).unwrap();
        assert_eq!(layer.forward(&x).unwrap().data(), &[16.0]);

        let id = Linear::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [3.0, 0.0, 1.0]]).unwrap();
        assert_eq!(id.forward(&x).unwrap(), x);
    }

    #[test]
    fn linear_sum_loss_bias_gradient_is_ones() {
        let mut id = Linear::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0]]).unwrap();
        let y = id.forward(&x).unwrap();
        id.backward(&x, &Matrix::filled(1, 3, 1.0)).unwrap();
        assert_eq!(y, x);
        assert_eq!(id.grad_bias(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn linear_rejects_shape_and_nan() {
        let layer = Linear::zeros(3, 2);
        assert!(matches!(layer.forward(&Matrix::zeros(1, 2)), Err(Error::Shape(_))));
        let mut x = Matrix::zeros(1, 3);
        x.set(0, 1, f64::INFINITY);
        assert!(matches!(layer.forward(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = stream(3, Stream::Probe);
        let x = normal_matrix(16, 5, &mut rng).map(|v| 3.0 * v + 2.0);
        let mut bn = BatchNorm::new(5);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let means = y.col_means();
        for c in 0..5 {
            assert!(means[c].abs() < 1e-6);
            let var: f64 = (0..16).map(|r| (y.get(r, c) - means[c]).powi(2)).sum::<f64>() / 16.0;
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_matches_direct_recomputation() {
        let mut rng = stream(4, Stream::Probe);
        let x = normal_matrix(4, 3, &mut rng);
        let mut bn = BatchNorm::new(3);
        bn.gamma = vec![0.5, 2.0, -1.0];
        bn.beta = vec![0.1, 0.0, 3.0];
        let y = bn.forward(&x, Mode::Train).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| x.get(r, c)).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            for r in 0..4 {
                let want = bn.gamma[c] * (col[r] - mean) / libm::sqrt(var + 1e-5) + bn.beta[c];
                assert!((y.get(r, c) - want).abs() < 1e-12);
            }
            let rm = 0.1 * mean;
            let rv = 0.9 + 0.1 * var;
            assert!((bn.running_mean[c] - rm).abs() < 1e-15);
            assert!((bn.running_var[c] - rv).abs() < 1e-15);
        }
    }

    #[test]
    fn batchnorm_eval_identity_and_errors() {
        let bn = BatchNorm::new(3);
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        let y = bn.forward_eval(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / libm::sqrt(1.0 + 1e-5)).abs() < 1e-15);
        }
        let mut bn = BatchNorm::new(3);
        assert_eq!(bn.forward_train(&x).unwrap_err(), Error::BatchTooSmall(1));
    }

    #[test]
    fn activations() {
        let x = Matrix::from_rows(&[[-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(Activation::Relu.forward(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        let big = Activation::Tanh.apply(50.0);
        assert!(big <= 1.0 && big > 0.99);
        let g = Activation::Tanh
            .backward(&Matrix::zeros(1, 1), &Matrix::filled(1, 1, 1.0))
            .unwrap();
        assert_eq!(g.data(), &[1.0]);
    }

    /// Scalar probe loss `Σ w ⊙ f(x)` with fixed random weights `w`.
    fn probe_loss(y: &Matrix, w: &Matrix) -> f64 {
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    }

    // Fuzzed finite-difference checks for each layer kind over random shapes.
    #[test]
    fn layer_gradients_match_finite_differences() {
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for case in 0..120u64 {
            let mut rng = stream(1000 + case, Stream::Probe);
            // two-row batch norm has input gradients at the roundoff floor
            let n = rng.gen_range(3..8);
            let din = rng.gen_range(1..6);
            let dout = rng.gen_range(1..6);
            let x = normal_matrix(n, din, &mut rng);

            // linear
            let mut lin = Linear::init_uniform(din, dout, &mut rng);
            lin.bias = (0..dout).map(|_| standard_normal(&mut rng)).collect();
            let w = normal_matrix(n, dout, &mut rng);
            lin.backward(&x, &w).unwrap();
            let dx = w.matmul_t(&lin.weight).unwrap();
            let base = lin.clone();
            let mut analytic = Vec::new();
            let mut numeric = Vec::new();
            let nw = din * dout;
            for i in 0..nw + dout {
                let mut plus = base.clone();
                let mut minus = base.clone();
                if i < nw {
                    plus.weight.data_mut()[i] += h;
                    minus.weight.data_mut()[i] -= h;
                    analytic.push(base.grad_weight().data()[i]);
                } else {
                    plus.bias[i - nw] += h;
                    minus.bias[i - nw] -= h;
                    analytic.push(base.grad_bias()[i - nw]);
                }
                let lp = probe_loss(&plus.forward(&x).unwrap(), &w);
                let lm = probe_loss(&minus.forward(&x).unwrap(), &w);
                numeric.push((lp - lm) / (2.0 * h));
            }
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                let lp = probe_loss(&base.forward(&xp).unwrap(), &w);
                let lm = probe_loss(&base.forward(&xm).unwrap(), &w);
                analytic.push(dx.data()[i]);
                numeric.push((lp - lm) / (2.0 * h));
            }

            // batch-norm (train mode, batch statistics path)
            let mut bn = BatchNorm::new(din);
            bn.gamma = (0..din).map(|_| 1.0 + 0.5 * standard_normal(&mut rng)).collect();
            bn.beta = (0..din).map(|_| standard_normal(&mut rng)).collect();
            let wb = normal_matrix(n, din, &mut rng);
            let mut probe = bn.clone();
            let (_, cache) = probe.forward_train(&x).unwrap();
            let dxb = probe.backward(&cache, &wb).unwrap();
            let eval_bn = |b: &BatchNorm, x: &Matrix| {
                let mut b = b.clone();
                probe_loss(&b.forward(x, Mode::Train).unwrap(), &wb)
            };
            for i in 0..din {
                for which in 0..2 {
                    let mut p = bn.clone();
                    let mut m = bn.clone();
                    if which == 0 {
                        p.gamma[i] += h;
                        m.gamma[i] -= h;
                        analytic.push(probe.grad_gamma()[i]);
                    } else {
                        p.beta[i] += h;
                        m.beta[i] -= h;
                        analytic.push(probe.grad_beta()[i]);
                    }
                    numeric.push((eval_bn(&p, &x) - eval_bn(&m, &x)) / (2.0 * h));
                }
            }
            for i in 0..x.data().len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp.data_mut()[i] += h;
                xm.data_mut()[i] -= h;
                analytic.push(dxb.data()[i]);
                numeric.push((eval_bn(&bn, &xp) - eval_bn(&bn, &xm)) / (2.0 * h));
            }

            // activations, probed away from the relu kink
            let xa = x.map(|v| if v.abs() < 1e-2 { v + 0.1 } else { v });
            let wa = normal_matrix(n, din, &mut rng);
            for act in [Activation::Relu, Activation::Tanh] {
                let out = act.forward(&xa);
                let dxa = act.backward(&out, &wa).unwrap();
                for i in 0..xa.data().len() {
                    let mut xp = xa.clone();
                    let mut xm = xa.clone();
                    xp.data_mut()[i] += h;
                    xm.data_mut()[i] -= h;
                    analytic.push(dxa.data()[i]);
                    numeric.push(
                        (probe_loss(&act.forward(&xp), &wa) - probe_loss(&act.forward(&xm), &wa))
                            / (2.0 * h),
                    );
                }
            }

            for (a, f) in analytic.iter().zip(&numeric) {
                worst = worst.max(rel_err(*a, *f));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
