//! Single-budget gradient estimators for the accepted-sample bound.
//!
//! All estimators consume one [`AcceptedBatch`] of `S >= 2` samples and
//! estimate gradients of `ELBO = E_r[A] + log Z_r` with
//! `A = log p - log q - log a`. The `log Z_r` term never has to be
//! estimated directly: differentiating through the accepted-sample law
//! turns it into a covariance between `A` and the acceptance score, which a
//! leave-one-out construction estimates without bias from the same batch.
//!
//! Proposal gradients come in two flavors:
//!
//! * [`rvrs_phi_gradient`]: pathwise. Each sample contributes a cotangent
//!   `c_s * (grad_z log p - grad_z log q)` contracted through the
//!   proposal's reparameterization path, with the per-sample scalar
//!
//!   ```text
//!   c_s = (A_s - mean A) * (w_s * dlog(a)/du + dw/du) / (S - 1)
//!       + w_s * (1 - dlog(a)/du) / S
//!   w_s = (zeta + a_raw^2) / (zeta + a_raw),   zeta = eps / (1 - eps)
//!   ```
//!
//!   When the guard is off (`zeta == 0`) the weights collapse to
//!   `w_s = a_raw` and the scalar reduces to
//!   `2 (A_s - mean A) a_raw (1 - a_raw) / (S - 1) + a_raw^2 / S`; that
//!   reduced expression is what the `zeta == 0` branch computes, so the
//!   guarded and unguarded paths agree exactly where they meet.
//!
//! * [`vrs_phi_gradient`]: score-function. Uses only log density values and
//!   the proposal score, no target gradients, at the price of much higher
//!   variance in high dimensions.
//!
//! Model parameters use [`theta_gradient_direct`] (the self-normalized
//! plug-in) or [`theta_gradient_full`] (adds the covariance correction from
//! the acceptance probability's dependence on `theta`). The threshold uses
//! [`t_gradient`], a descent direction for the squared gap between the
//! acceptance rate seen through the batch and a target rate.

use crate::error::{Error, Result};
use crate::math::mean;
use crate::proposal::Proposal;
use crate::sampler::{AcceptanceConfig, AcceptedBatch};
use crate::target::Target;

/// Which model-parameter estimator a training loop applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaEstimator {
    /// Plug-in average of `grad_theta log p` over the batch.
    Direct,
    /// Plug-in average plus the acceptance covariance correction.
    Full,
}

/// All gradients a training step needs, estimated from one batch.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    /// Gradient with respect to the flattened proposal parameters.
    pub d_phi: Vec<f64>,
    /// Gradient with respect to the model parameters, when requested.
    pub d_theta: Option<Vec<f64>>,
    /// Descent direction for the threshold, when a target rate was given.
    pub d_threshold: Option<f64>,
    /// Batch size the estimates were formed from.
    pub s_used: usize,
}

fn require_batch(batch: &AcceptedBatch, min: usize) -> Result<usize> {
    let s = batch.s();
    if s < min {
        return Err(Error::BatchTooSmall { s, min });
    }
    Ok(s)
}

/// Per-sample scalar coefficients of the pathwise estimator: the cotangent
/// of sample `s` is `coeff_s * (grad_z log p - grad_z log q)`.
///
/// Shared by the single-proposal estimator and the amortized local-variable
/// estimator so the two can never drift apart.
pub(crate) fn pathwise_sample_coeffs(
    a_raw: &[f64],
    a: &[f64],
    integrand: &[f64],
    cfg: &AcceptanceConfig,
) -> Result<Vec<f64>> {
    let s = a_raw.len();
    if s < 2 {
        return Err(Error::BatchTooSmall { s, min: 2 });
    }
    let mu_a = mean(integrand);
    let sm1 = (s - 1) as f64;
    let sf = s as f64;
    let zeta = cfg.zeta();
    let coeffs = if zeta == 0.0 {
        // Unguarded reduced form: w = a_raw, dlog(a)/du = 1 - a_raw.
        a_raw
            .iter()
            .zip(integrand)
            .map(|(&ar, &big_a)| {
                (big_a - mu_a) * 2.0 * ar * (1.0 - ar) / sm1 + ar * ar / sf
            })
            .collect()
    } else {
        let eps = cfg.epsilon;
        a_raw
            .iter()
            .zip(a)
            .zip(integrand)
            .map(|((&ar, &ag), &big_a)| {
                let d_sig = ar * (1.0 - ar);
                let dla_coef = (1.0 - eps) * d_sig / ag;
                let w = (zeta + ar * ar) / (zeta + ar);
                let dw_coef = d_sig * (ar * ar + 2.0 * zeta * ar - zeta)
                    / ((zeta + ar) * (zeta + ar));
                (big_a - mu_a) * (w * dla_coef + dw_coef) / sm1 + w * (1.0 - dla_coef) / sf
            })
            .collect()
    };
    Ok(coeffs)
}

/// Per-sample scalar coefficients for any parameter that enters the bound
/// only through the target log density (model parameters, or a conditioning
/// variable of a local problem): the gradient contribution of sample `s` is
/// `coeff_s * d(log p)/d(parameter)` with
/// `coeff_s = (A_s - mean A) * dlog(a)/du / (S - 1) + 1/S`.
///
/// This is the covariance identity `E_r[g] + Cov_r(A, dlog(a)/du * g)` in
/// leave-one-out form; the two terms merge because `dA = (1 - dlog(a)/du) g`
/// and the normalizer contributes `+E_r[dlog(a)/du * g]`.
pub(crate) fn loglik_channel_coeffs(
    a_raw: &[f64],
    a: &[f64],
    integrand: &[f64],
    cfg: &AcceptanceConfig,
) -> Result<Vec<f64>> {
    let s = a_raw.len();
    if s < 2 {
        return Err(Error::BatchTooSmall { s, min: 2 });
    }
    let mu_a = mean(integrand);
    let sm1 = (s - 1) as f64;
    let inv_s = 1.0 / s as f64;
    let coeffs = if cfg.epsilon == 0.0 {
        a_raw
            .iter()
            .zip(integrand)
            .map(|(&ar, &big_a)| (big_a - mu_a) * (1.0 - ar) / sm1 + inv_s)
            .collect()
    } else {
        let eps = cfg.epsilon;
        a_raw
            .iter()
            .zip(a)
            .zip(integrand)
            .map(|((&ar, &ag), &big_a)| {
                let dla = (1.0 - eps) * ar * (1.0 - ar) / ag;
                (big_a - mu_a) * dla / sm1 + inv_s
            })
            .collect()
    };
    Ok(coeffs)
}

/// Pathwise gradient of the bound with respect to the proposal parameters.
pub fn rvrs_phi_gradient<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    batch: &AcceptedBatch,
) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    require_batch(batch, 2)?;
    let coeffs = pathwise_sample_coeffs(&batch.a_raw, &batch.a, &batch.elbo_integrand, cfg)?;
    let mut grad = vec![0.0; proposal.param_len()];
    for (s, &c) in coeffs.iter().enumerate() {
        let z = &batch.z[s];
        let dlp = target.grad_z_log_joint(theta, z)?;
        let dlq = proposal.grad_z_log_density(z);
        let cot: Vec<f64> = dlp.iter().zip(&dlq).map(|(&p, &q)| c * (p - q)).collect();
        let g = proposal.velocity_vjp(z, &batch.eps[s], &cot)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(grad)
}

/// Score-function gradient of the bound with respect to the proposal
/// parameters. Needs no target gradients.
pub fn vrs_phi_gradient<P>(
    proposal: &P,
    cfg: &AcceptanceConfig,
    batch: &AcceptedBatch,
) -> Result<Vec<f64>>
where
    P: Proposal + ?Sized,
{
    let s = require_batch(batch, 2)?;
    let mu_a = mean(&batch.elbo_integrand);
    let sm1 = (s - 1) as f64;
    let zeta = cfg.zeta();
    let mut grad = vec![0.0; proposal.param_len()];
    for i in 0..s {
        let ar = batch.a_raw[i];
        let weight = if zeta == 0.0 { ar } else { (zeta + ar * ar) / (zeta + ar) };
        let c = (batch.elbo_integrand[i] - mu_a) * weight / sm1;
        let score = proposal.score(&batch.z[i]);
        for (acc, v) in grad.iter_mut().zip(&score) {
            *acc += c * v;
        }
    }
    Ok(grad)
}

/// Pathwise gradient of the plain variational bound `E_q[log p - log q]`,
/// holding the density term of `log q` fixed (the sticking-the-landing
/// form). This is exactly what [`rvrs_phi_gradient`] degenerates to when
/// every acceptance probability saturates at 1.
pub fn stl_phi_gradient<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    batch: &AcceptedBatch,
) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let s = require_batch(batch, 1)?;
    let mut grad = vec![0.0; proposal.param_len()];
    let inv_s = 1.0 / s as f64;
    for i in 0..s {
        let z = &batch.z[i];
        let dlp = target.grad_z_log_joint(theta, z)?;
        let dlq = proposal.grad_z_log_density(z);
        let cot: Vec<f64> = dlp.iter().zip(&dlq).map(|(&p, &q)| inv_s * (p - q)).collect();
        let g = proposal.velocity_vjp(z, &batch.eps[i], &cot)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok(grad)
}

/// Plug-in model-parameter gradient: the batch average of
/// `grad_theta log p`.
pub fn theta_gradient_direct<T>(
    target: &T,
    theta: &[f64],
    batch: &AcceptedBatch,
) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
{
    let s = require_batch(batch, 1)?;
    let mut grad = vec![0.0; target.theta_dim()];
    for z in &batch.z {
        let g = target.grad_theta_log_joint(theta, z)?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    for g in &mut grad {
        *g /= s as f64;
    }
    Ok(grad)
}

/// Full model-parameter gradient: the plug-in average plus the covariance
/// correction that accounts for the acceptance probability moving with
/// `theta`. Each sample's `grad_theta log p` is weighted by the
/// [`loglik_channel_coeffs`] scalar, which covers both parts at once.
pub fn theta_gradient_full<T>(
    target: &T,
    theta: &[f64],
    cfg: &AcceptanceConfig,
    batch: &AcceptedBatch,
) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
{
    require_batch(batch, 2)?;
    let coeffs = loglik_channel_coeffs(&batch.a_raw, &batch.a, &batch.elbo_integrand, cfg)?;
    let mut grad = vec![0.0; target.theta_dim()];
    for (i, &c) in coeffs.iter().enumerate() {
        let g = target.grad_theta_log_joint(theta, &batch.z[i])?;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += c * v;
        }
    }
    Ok(grad)
}

/// Descent direction for the threshold from guarded acceptance
/// probabilities alone:
/// `(1/S) sum_s a_s (1 - a_s) (mean of the other a - z_tgt)`.
///
/// Stepping `T -= t_gradient` descends the squared gap between the
/// acceptance rate under the accepted-sample law and the target rate
/// `z_tgt`; the leave-one-out inner mean keeps the product unbiased.
pub fn t_gradient_from_a(a: &[f64], z_tgt: f64) -> Result<f64> {
    let s = a.len();
    if s < 2 {
        return Err(Error::BatchTooSmall { s, min: 2 });
    }
    let total: f64 = a.iter().sum();
    let sm1 = (s - 1) as f64;
    let mut g = 0.0;
    for &ai in a {
        g += ai * (1.0 - ai) * ((total - ai) / sm1 - z_tgt);
    }
    Ok(g / s as f64)
}

/// [`t_gradient_from_a`] applied to an accepted batch.
pub fn t_gradient(batch: &AcceptedBatch, z_tgt: f64) -> Result<f64> {
    t_gradient_from_a(&batch.a, z_tgt)
}

/// Threshold descent direction estimated from plain proposal draws instead
/// of accepted samples: the first half of `m` draws estimates the
/// acceptance rate gap, the second half the sensitivity factor, and their
/// independence keeps the product unbiased under the proposal.
pub fn t_gradient_from_proposals<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    m: usize,
    z_tgt: f64,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if m < 4 || m % 2 != 0 {
        return Err(Error::BatchTooSmall { s: m, min: 4 });
    }
    let half = m / 2;
    let mut gap = 0.0;
    for _ in 0..half {
        let (z, _) = proposal.sample_reparam(rng);
        let log_ratio = target.log_joint(theta, &z)? - proposal.log_density(&z);
        gap += cfg.acceptance_parts(log_ratio).a;
    }
    gap = gap / half as f64 - z_tgt;
    let mut sensitivity = 0.0;
    for _ in 0..half {
        let (z, _) = proposal.sample_reparam(rng);
        let log_ratio = target.log_joint(theta, &z)? - proposal.log_density(&z);
        let a = cfg.acceptance_parts(log_ratio).a;
        sensitivity += a * (1.0 - a);
    }
    sensitivity /= half as f64;
    Ok(sensitivity * gap)
}

/// Estimates every gradient a training step needs from one batch.
///
/// `theta_estimator` selects the model-parameter route (or skips it);
/// `z_tgt` requests the threshold direction.
pub fn estimate_gradients<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    batch: &AcceptedBatch,
    theta_estimator: Option<ThetaEstimator>,
    z_tgt: Option<f64>,
) -> Result<GradientEstimate>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let d_phi = rvrs_phi_gradient(target, theta, proposal, cfg, batch)?;
    let d_theta = match theta_estimator {
        None => None,
        Some(ThetaEstimator::Direct) => Some(theta_gradient_direct(target, theta, batch)?),
        Some(ThetaEstimator::Full) => Some(theta_gradient_full(target, theta, cfg, batch)?),
    };
    let d_threshold = match z_tgt {
        None => None,
        Some(tgt) => Some(t_gradient(batch, tgt)?),
    };
    Ok(GradientEstimate { d_phi, d_theta, d_threshold, s_used: batch.s() })
}
