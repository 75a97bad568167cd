//! Unnormalized target densities.
//!
//! A target exposes `log p(theta, z)` up to an unknown normalizing constant,
//! together with its gradient in `z` and, when the model has learnable
//! parameters, its gradient in `theta`. The sampler and the gradient
//! estimators only ever touch targets through the [`Target`] trait, so any
//! differentiable unnormalized density can be plugged in.
//!
//! Provided models:
//!
//! * [`AnalyticGaussianTarget`]: a Gaussian with known mean, covariance
//!   factor, and log normalizer; the ground-truth workhorse for tests.
//! * [`FunnelTarget`]: a two-dimensional funnel rotated 45 degrees so that
//!   no diagonal Gaussian can match both the neck and the mouth.
//! * [`LogisticRegressionTarget`]: Bayesian logistic regression with a
//!   standard Normal prior over the weights.
//! * [`HierStudentTModel`]: hierarchical robust regression where each
//!   datapoint carries a local log precision, with the exact Student-t
//!   marginal available through [`HierStudentTModel::integrated`].

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{check_len, Error, Result};
use crate::math::{
    sigmoid, softplus, std_normal_grad, std_normal_logpdf, tri_solve_lower, tri_solve_lower_t,
    LN_2PI,
};
use crate::rng::rng_from_seed;

/// An unnormalized, differentiable target density.
pub trait Target {
    /// Dimension of the latent space.
    fn dim(&self) -> usize;

    /// Number of learnable model parameters; zero for fixed models.
    fn theta_dim(&self) -> usize {
        0
    }

    /// Unnormalized log density `log p(theta, z)`. `theta` must have length
    /// [`Target::theta_dim`] (so fixed models take an empty slice).
    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64>;

    /// Gradient of [`Target::log_joint`] with respect to `z`.
    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>>;

    /// Gradient of [`Target::log_joint`] with respect to `theta`.
    ///
    /// Fails with [`Error::NoTheta`] when the model has no learnable
    /// parameters.
    fn grad_theta_log_joint(&self, _theta: &[f64], _z: &[f64]) -> Result<Vec<f64>> {
        Err(Error::NoTheta)
    }
}

/// Gaussian target with a known log normalizer.
///
/// `log p(theta, z) = theta[0] + log Normal(z; mean, L L^T)`, so the true
/// evidence is exactly `theta[0]` and quadrature oracles can be validated in
/// closed form. The single model parameter is the log normalizer itself,
/// which makes this the reference problem for model-parameter gradients: the
/// exact gradient of the evidence with respect to `theta[0]` is 1.
#[derive(Debug, Clone)]
pub struct AnalyticGaussianTarget {
    /// Initial log normalizer; also the value returned by
    /// [`AnalyticGaussianTarget::theta0`].
    pub log_zp: f64,
    /// Posterior mean.
    pub mean: Vec<f64>,
    /// Dense row-major lower-triangular covariance factor `L`.
    pub chol: Vec<f64>,
}

impl AnalyticGaussianTarget {
    /// Target with mean `mean`, covariance `L L^T`, and log normalizer
    /// `log_zp`.
    pub fn new(log_zp: f64, mean: Vec<f64>, chol: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::Dim { expected: 1, got: 0 });
        }
        check_len(d * d, chol.len())?;
        for i in 0..d {
            if chol[i * d + i] <= 0.0 {
                return Err(Error::Config(format!(
                    "covariance factor needs a positive diagonal, got {} at {i}",
                    chol[i * d + i]
                )));
            }
        }
        Ok(Self { log_zp, mean, chol })
    }

    /// Standard Normal posterior in `d` dimensions with log normalizer
    /// `log_zp`.
    pub fn standard(d: usize, log_zp: f64) -> Self {
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            chol[i * d + i] = 1.0;
        }
        Self::new(log_zp, vec![0.0; d], chol).expect("identity factor is valid")
    }

    /// One-dimensional target `exp(log_zp) * Normal(mean, sd^2)`.
    pub fn scalar(log_zp: f64, mean: f64, sd: f64) -> Self {
        Self::new(log_zp, vec![mean], vec![sd]).expect("sd > 0")
    }

    /// The model parameter vector this target was constructed with.
    pub fn theta0(&self) -> Vec<f64> {
        vec![self.log_zp]
    }

    fn whitened(&self, z: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let diff: Vec<f64> = z.iter().zip(&self.mean).map(|(&a, &b)| a - b).collect();
        tri_solve_lower(&self.chol, d, &diff)
    }
}

impl Target for AnalyticGaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        check_len(1, theta.len())?;
        check_len(self.dim(), z.len())?;
        let d = self.dim();
        let y = self.whitened(z);
        let log_det: f64 = (0..d).map(|i| self.chol[i * d + i].ln()).sum();
        let sq: f64 = y.iter().map(|&v| v * v).sum();
        Ok(theta[0] - 0.5 * d as f64 * LN_2PI - log_det - 0.5 * sq)
    }

    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(1, theta.len())?;
        check_len(self.dim(), z.len())?;
        let d = self.dim();
        let y = self.whitened(z);
        let lt_y = tri_solve_lower_t(&self.chol, d, &y);
        Ok(lt_y.iter().map(|&v| -v).collect())
    }

    fn grad_theta_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(1, theta.len())?;
        check_len(self.dim(), z.len())?;
        Ok(vec![1.0])
    }
}

/// Two-dimensional funnel rotated 45 degrees.
///
/// In rotated coordinates `v = (x + y) / sqrt(2)`, `w = (x - y) / sqrt(2)`
/// the density is `Normal(v; 0, 1) * Normal(w; 0, exp(v))`, a classic funnel
/// whose conditional scale of `w` varies by orders of magnitude with `v`.
/// The rotation makes the tight neck diagonal in `(x, y)`, so a mean-field
/// Gaussian must trade coverage of the mouth against the neck. The density
/// is normalized: its integral over the plane is exactly 1.
#[derive(Debug, Clone, Default)]
pub struct FunnelTarget;

impl FunnelTarget {
    /// The funnel target.
    pub fn new() -> Self {
        Self
    }
}

impl Target for FunnelTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        check_len(0, theta.len())?;
        check_len(2, z.len())?;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = (z[0] + z[1]) * s;
        let w = (z[0] - z[1]) * s;
        Ok(-LN_2PI - 0.5 * v * v - 0.5 * v - 0.5 * w * w * (-v).exp())
    }

    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(0, theta.len())?;
        check_len(2, z.len())?;
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = (z[0] + z[1]) * s;
        let w = (z[0] - z[1]) * s;
        let ev = (-v).exp();
        let dv = -v - 0.5 + 0.5 * w * w * ev;
        let dw = -w * ev;
        Ok(vec![(dv + dw) * s, (dv - dw) * s])
    }
}

/// Bayesian logistic regression with a standard Normal prior on the weights.
///
/// `log p(z) = log Normal(z; 0, I) + sum_n [ y_n t_n - softplus(t_n) ]` with
/// logits `t_n = x_n . z`. No intercept column is added; include one in the
/// feature matrix if the model needs it.
#[derive(Debug, Clone)]
pub struct LogisticRegressionTarget {
    features: Vec<f64>,
    labels: Vec<u8>,
    n: usize,
    d: usize,
}

impl LogisticRegressionTarget {
    /// Target over `n` datapoints with `d` features stored row-major in
    /// `features`. Labels must be 0 or 1.
    pub fn new(features: Vec<f64>, labels: Vec<u8>, n: usize, d: usize) -> Result<Self> {
        check_len(n * d, features.len())?;
        check_len(n, labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::Dataset(format!("labels must be 0 or 1, got {bad}")));
        }
        Ok(Self { features, labels, n, d })
    }

    /// Builds a target from numeric rows whose last column is the 0/1 label.
    /// Feature columns are standardized to zero mean and unit variance.
    pub fn from_table(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Dataset("empty dataset".into()));
        }
        let width = rows[0].len();
        if width < 2 {
            return Err(Error::Dataset("need at least one feature column and a label".into()));
        }
        let d = width - 1;
        let mut features = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(Error::Dataset(format!(
                    "row {i} has {} columns, expected {width}",
                    row.len()
                )));
            }
            features.extend_from_slice(&row[..d]);
            let y = row[d];
            if y != 0.0 && y != 1.0 {
                return Err(Error::Dataset(format!("label in row {i} must be 0 or 1, got {y}")));
            }
            labels.push(y as u8);
        }
        standardize_columns(&mut features, n, d);
        Self::new(features, labels, n, d)
    }

    /// Synthetic instance: independent standard Normal features standardized
    /// per column and multiplied by `feature_scale`, true weights alternating
    /// `+1, -1, ...`, labels drawn from the implied Bernoulli probabilities.
    ///
    /// Shrinking `feature_scale` weakens the likelihood, which widens the
    /// posterior; at scale 1 the posterior is sharply concentrated.
    pub fn synthetic(n: usize, d: usize, feature_scale: f64, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut features: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        standardize_columns(&mut features, n, d);
        for v in &mut features {
            *v *= feature_scale;
        }
        let weights: Vec<f64> = (0..d).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let labels: Vec<u8> = (0..n)
            .map(|i| {
                let logit: f64 =
                    (0..d).map(|j| features[i * d + j] * weights[j]).sum();
                let u: f64 = rng.gen();
                u8::from(u < sigmoid(logit))
            })
            .collect();
        Self::new(features, labels, n, d).expect("generated shapes are consistent")
    }

    /// Number of datapoints.
    pub fn n_points(&self) -> usize {
        self.n
    }

    fn logit(&self, i: usize, z: &[f64]) -> f64 {
        let row = &self.features[i * self.d..(i + 1) * self.d];
        row.iter().zip(z).map(|(&x, &w)| x * w).sum()
    }
}

impl Target for LogisticRegressionTarget {
    fn dim(&self) -> usize {
        self.d
    }

    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        check_len(0, theta.len())?;
        check_len(self.d, z.len())?;
        let mut acc = std_normal_logpdf(z);
        for i in 0..self.n {
            let t = self.logit(i, z);
            acc += f64::from(self.labels[i]) * t - softplus(t);
        }
        Ok(acc)
    }

    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(0, theta.len())?;
        check_len(self.d, z.len())?;
        let mut grad = std_normal_grad(z);
        for i in 0..self.n {
            let resid = f64::from(self.labels[i]) - sigmoid(self.logit(i, z));
            let row = &self.features[i * self.d..(i + 1) * self.d];
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += resid * x;
            }
        }
        Ok(grad)
    }
}

fn standardize_columns(features: &mut [f64], n: usize, d: usize) {
    for j in 0..d {
        let mut mean = 0.0;
        for i in 0..n {
            mean += features[i * d + j];
        }
        mean /= n as f64;
        let mut var = 0.0;
        for i in 0..n {
            let c = features[i * d + j] - mean;
            var += c * c;
        }
        var /= n as f64;
        let sd = var.sqrt().max(1e-12);
        for i in 0..n {
            features[i * d + j] = (features[i * d + j] - mean) / sd;
        }
    }
}

/// Hierarchical robust regression with per-datapoint log precisions.
///
/// Global latents are `z_G = [beta | b]` with a standard Normal prior.
/// Each datapoint `n` carries a local latent `z_n = log(lambda_n)` with
///
/// ```text
/// lambda_n ~ Gamma(nu/2, nu/2)
/// y_n      ~ Normal(x_n . beta + b, sigma^2 / lambda_n)
/// ```
///
/// Integrating out `lambda_n` exactly gives a Student-t likelihood with `nu`
/// degrees of freedom, exposed by [`HierStudentTModel::integrated`]; that
/// collapsed model is the ground truth the hierarchical approximation is
/// compared against. The local term is expressed in `z_n` space and includes
/// the `log(lambda)` Jacobian of the transform.
///
/// Model parameters `theta = [log nu, log sigma]` are learnable when the
/// model is built with `learn_theta`; otherwise the stored values are used
/// and `theta` is empty.
#[derive(Debug, Clone)]
pub struct HierStudentTModel {
    x: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    d_x: usize,
    log_nu: f64,
    log_sigma: f64,
    learn_theta: bool,
}

impl HierStudentTModel {
    /// Model over `n` datapoints with `d_x` covariates stored row-major in
    /// `x`, fixed degrees of freedom `nu`, and fixed noise scale `sigma`.
    pub fn new(
        x: Vec<f64>,
        y: Vec<f64>,
        n: usize,
        d_x: usize,
        nu: f64,
        sigma: f64,
        learn_theta: bool,
    ) -> Result<Self> {
        check_len(n * d_x, x.len())?;
        check_len(n, y.len())?;
        if nu <= 0.0 || sigma <= 0.0 {
            return Err(Error::Config(format!(
                "nu and sigma must be positive, got nu = {nu}, sigma = {sigma}"
            )));
        }
        Ok(Self { x, y, n, d_x, log_nu: nu.ln(), log_sigma: sigma.ln(), learn_theta })
    }

    /// Synthetic instance: standard Normal covariates, true weights
    /// alternating `+1, -1, ...` with intercept `0.5`, Gaussian noise of
    /// scale `sigma` except that every fourth datapoint is an outlier drawn
    /// with scale `outlier_sd` instead.
    pub fn synthetic(
        n: usize,
        d_x: usize,
        nu: f64,
        sigma: f64,
        outlier_sd: f64,
        seed: u64,
    ) -> Self {
        let mut rng = rng_from_seed(seed);
        let x: Vec<f64> = (0..n * d_x).map(|_| rng.sample(StandardNormal)).collect();
        let weights: Vec<f64> = (0..d_x).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let intercept = 0.5;
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let m: f64 =
                    intercept + (0..d_x).map(|j| x[i * d_x + j] * weights[j]).sum::<f64>();
                let sd = if i % 4 == 0 { outlier_sd } else { sigma };
                let noise: f64 = rng.sample(StandardNormal);
                m + sd * noise
            })
            .collect();
        Self::new(x, y, n, d_x, nu, sigma, false).expect("generated shapes are consistent")
    }

    /// Number of datapoints.
    pub fn n_points(&self) -> usize {
        self.n
    }

    /// Dimension of the global latent block `[beta | b]`.
    pub fn global_dim(&self) -> usize {
        self.d_x + 1
    }

    /// Dimension of one local latent (the log precision).
    pub fn local_dim(&self) -> usize {
        1
    }

    /// The model parameter vector matching [`Target::theta_dim`]: empty for
    /// fixed models, `[log nu, log sigma]` when parameters are learnable.
    pub fn theta0(&self) -> Vec<f64> {
        if self.learn_theta {
            vec![self.log_nu, self.log_sigma]
        } else {
            Vec::new()
        }
    }

    fn resolve_theta(&self, theta: &[f64]) -> Result<(f64, f64)> {
        check_len(self.theta_dim(), theta.len())?;
        if self.learn_theta {
            Ok((theta[0].exp(), theta[1].exp()))
        } else {
            Ok((self.log_nu.exp(), self.log_sigma.exp()))
        }
    }

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.n {
            Err(Error::Index { index: n, len: self.n })
        } else {
            Ok(())
        }
    }

    fn predicted_mean(&self, z_g: &[f64], i: usize) -> f64 {
        let row = &self.x[i * self.d_x..(i + 1) * self.d_x];
        let b = z_g[self.d_x];
        b + row.iter().zip(z_g).map(|(&x, &w)| x * w).sum::<f64>()
    }

    /// Log of the standard Normal prior over the global block.
    pub fn global_log_prior(&self, z_g: &[f64]) -> Result<f64> {
        check_len(self.global_dim(), z_g.len())?;
        Ok(std_normal_logpdf(z_g))
    }

    /// Gradient of [`HierStudentTModel::global_log_prior`].
    pub fn global_grad_prior(&self, z_g: &[f64]) -> Result<Vec<f64>> {
        check_len(self.global_dim(), z_g.len())?;
        Ok(std_normal_grad(z_g))
    }

    /// Local joint term for datapoint `n`: log prior of the local precision
    /// plus the datapoint log likelihood, as a function of `z_n = log lambda`.
    pub fn local_log_joint(&self, theta: &[f64], z_g: &[f64], n: usize, z_n: &[f64]) -> Result<f64> {
        let (nu, sigma) = self.resolve_theta(theta)?;
        check_len(self.global_dim(), z_g.len())?;
        check_len(1, z_n.len())?;
        self.check_index(n)?;
        let alpha = 0.5 * nu;
        let zn = z_n[0];
        let lambda = zn.exp();
        let m = self.predicted_mean(z_g, n);
        let resid = self.y[n] - m;
        let gamma_part = alpha * alpha.ln() - ln_gamma(alpha) + (alpha - 1.0) * zn - alpha * lambda;
        let like_part =
            -0.5 * LN_2PI - sigma.ln() + 0.5 * zn - lambda * resid * resid / (2.0 * sigma * sigma);
        // The + z_n term is the Jacobian of lambda = exp(z_n).
        Ok(gamma_part + zn + like_part)
    }

    /// Derivative of the local joint term with respect to `z_n`.
    pub fn local_grad_zn(&self, theta: &[f64], z_g: &[f64], n: usize, z_n: &[f64]) -> Result<Vec<f64>> {
        let (nu, sigma) = self.resolve_theta(theta)?;
        check_len(self.global_dim(), z_g.len())?;
        check_len(1, z_n.len())?;
        self.check_index(n)?;
        let alpha = 0.5 * nu;
        let lambda = z_n[0].exp();
        let resid = self.y[n] - self.predicted_mean(z_g, n);
        Ok(vec![
            alpha + 0.5 - alpha * lambda - lambda * resid * resid / (2.0 * sigma * sigma),
        ])
    }

    /// Gradient of the local joint term with respect to the global block.
    pub fn local_grad_zg(&self, theta: &[f64], z_g: &[f64], n: usize, z_n: &[f64]) -> Result<Vec<f64>> {
        let (_, sigma) = self.resolve_theta(theta)?;
        check_len(self.global_dim(), z_g.len())?;
        check_len(1, z_n.len())?;
        self.check_index(n)?;
        let lambda = z_n[0].exp();
        let resid = self.y[n] - self.predicted_mean(z_g, n);
        let scale = lambda * resid / (sigma * sigma);
        let row = &self.x[n * self.d_x..(n + 1) * self.d_x];
        let mut grad = Vec::with_capacity(self.global_dim());
        grad.extend(row.iter().map(|&x| scale * x));
        grad.push(scale);
        Ok(grad)
    }

    /// Gradient of the local joint term with respect to
    /// `theta = [log nu, log sigma]`.
    pub fn local_grad_theta(
        &self,
        theta: &[f64],
        z_g: &[f64],
        n: usize,
        z_n: &[f64],
    ) -> Result<Vec<f64>> {
        if !self.learn_theta {
            return Err(Error::NoTheta);
        }
        let (nu, sigma) = self.resolve_theta(theta)?;
        check_len(self.global_dim(), z_g.len())?;
        check_len(1, z_n.len())?;
        self.check_index(n)?;
        let alpha = 0.5 * nu;
        let zn = z_n[0];
        let lambda = zn.exp();
        let resid = self.y[n] - self.predicted_mean(z_g, n);
        let d_alpha = alpha.ln() + 1.0 - digamma(alpha) + zn - lambda;
        let d_log_nu = d_alpha * alpha;
        let d_log_sigma = -1.0 + lambda * resid * resid / (sigma * sigma);
        Ok(vec![d_log_nu, d_log_sigma])
    }

    /// The collapsed model with every local precision integrated out
    /// exactly, using the currently stored `nu` and `sigma`.
    pub fn integrated(&self) -> IntegratedStudentTTarget {
        IntegratedStudentTTarget {
            x: self.x.clone(),
            y: self.y.clone(),
            n: self.n,
            d_x: self.d_x,
            nu: self.log_nu.exp(),
            sigma: self.log_sigma.exp(),
        }
    }
}

impl Target for HierStudentTModel {
    /// Dimension of the full joint latent `[beta | b | z_1 ... z_N]`.
    fn dim(&self) -> usize {
        self.global_dim() + self.n
    }

    fn theta_dim(&self) -> usize {
        if self.learn_theta {
            2
        } else {
            0
        }
    }

    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        check_len(self.dim(), z.len())?;
        let g = self.global_dim();
        let (z_g, locals) = z.split_at(g);
        let mut acc = self.global_log_prior(z_g)?;
        for i in 0..self.n {
            acc += self.local_log_joint(theta, z_g, i, &locals[i..i + 1])?;
        }
        Ok(acc)
    }

    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), z.len())?;
        let g = self.global_dim();
        let (z_g, locals) = z.split_at(g);
        let mut grad = self.global_grad_prior(z_g)?;
        grad.reserve(self.n);
        for i in 0..self.n {
            let zi = &locals[i..i + 1];
            let gg = self.local_grad_zg(theta, z_g, i, zi)?;
            for (a, b) in grad[..g].iter_mut().zip(&gg) {
                *a += b;
            }
            grad.push(self.local_grad_zn(theta, z_g, i, zi)?[0]);
        }
        Ok(grad)
    }

    fn grad_theta_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if !self.learn_theta {
            return Err(Error::NoTheta);
        }
        check_len(self.dim(), z.len())?;
        let g = self.global_dim();
        let (z_g, locals) = z.split_at(g);
        let mut grad = vec![0.0; 2];
        for i in 0..self.n {
            let gt = self.local_grad_theta(theta, z_g, i, &locals[i..i + 1])?;
            grad[0] += gt[0];
            grad[1] += gt[1];
        }
        Ok(grad)
    }
}

/// Robust regression with the local precisions integrated out exactly.
///
/// The likelihood of each datapoint is Student-t with `nu` degrees of
/// freedom, location `x_n . beta + b`, and scale `sigma`; the prior over
/// `[beta | b]` is standard Normal. Serves as the exact reference model for
/// the hierarchical approximation.
#[derive(Debug, Clone)]
pub struct IntegratedStudentTTarget {
    x: Vec<f64>,
    y: Vec<f64>,
    n: usize,
    d_x: usize,
    nu: f64,
    sigma: f64,
}

impl IntegratedStudentTTarget {
    fn student_t_lnpdf(&self, resid: f64) -> f64 {
        let nu = self.nu;
        let c = ln_gamma(0.5 * (nu + 1.0))
            - ln_gamma(0.5 * nu)
            - 0.5 * (nu * std::f64::consts::PI).ln()
            - self.sigma.ln();
        let t = resid / self.sigma;
        c - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()
    }
}

impl Target for IntegratedStudentTTarget {
    fn dim(&self) -> usize {
        self.d_x + 1
    }

    fn log_joint(&self, theta: &[f64], z: &[f64]) -> Result<f64> {
        check_len(0, theta.len())?;
        check_len(self.dim(), z.len())?;
        let mut acc = std_normal_logpdf(z);
        let b = z[self.d_x];
        for i in 0..self.n {
            let row = &self.x[i * self.d_x..(i + 1) * self.d_x];
            let m = b + row.iter().zip(z).map(|(&x, &w)| x * w).sum::<f64>();
            acc += self.student_t_lnpdf(self.y[i] - m);
        }
        Ok(acc)
    }

    fn grad_z_log_joint(&self, theta: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        check_len(0, theta.len())?;
        check_len(self.dim(), z.len())?;
        let mut grad = std_normal_grad(z);
        let b = z[self.d_x];
        for i in 0..self.n {
            let row = &self.x[i * self.d_x..(i + 1) * self.d_x];
            let m = b + row.iter().zip(z).map(|(&x, &w)| x * w).sum::<f64>();
            let resid = self.y[i] - m;
            let d_m = (self.nu + 1.0) * resid
                / (self.nu * self.sigma * self.sigma + resid * resid);
            for (g, &x) in grad.iter_mut().zip(row) {
                *g += d_m * x;
            }
            grad[self.d_x] += d_m;
        }
        Ok(grad)
    }
}

/// Reads a whitespace- or comma-separated numeric table, skipping blank
/// lines and `#` comments.
pub fn load_numeric_table(path: &std::path::Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: Result<Vec<f64>> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|_| {
                    Error::Dataset(format!(
                        "{}:{}: cannot parse '{s}' as a number",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect();
        rows.push(row?);
    }
    if rows.is_empty() {
        return Err(Error::Dataset(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}
