//! Smoothed rejection sampling.
//!
//! Given a proposal `q` and an unnormalized target `p`, each proposal draw
//! `z ~ q` is accepted with probability
//!
//! ```text
//! a_raw(z) = sigmoid(log p(z) - log q(z) + T)
//! a(z)     = epsilon + (1 - epsilon) * a_raw(z)
//! ```
//!
//! The accepted samples follow `r(z) = q(z) a(z) / Z_r` with
//! `Z_r = E_q[a]`, the average acceptance rate. The threshold `T` trades
//! compute for fidelity: `T -> +inf` accepts every draw and `r` collapses to
//! `q`, while lowering `T` rejects harder and bends `r` toward the target at
//! the cost of more proposals per accepted sample. The floor `epsilon`
//! keeps every acceptance probability strictly positive so that
//! log-acceptance terms and their gradients stay finite in regions the
//! proposal covers badly.
//!
//! The evidence lower bound of `r` decomposes into per-sample integrands
//!
//! ```text
//! A(z) = log p(z) - log q(z) - log a(z)
//! ELBO = E_r[A] + log Z_r
//! ```
//!
//! and [`AcceptedBatch`] caches everything the gradient estimators need so
//! no density is evaluated twice.
//!
//! ```
//! use rvrs::proposal::MeanFieldNormal;
//! use rvrs::sampler::{rejection_sample, AcceptanceConfig};
//! use rvrs::target::AnalyticGaussianTarget;
//! use rvrs::rng::rng_from_seed;
//!
//! // Proposal equals the posterior, so acceptance is constant at
//! // sigmoid(-1) and accepted samples are plain proposal draws.
//! let target = AnalyticGaussianTarget::standard(1, -1.0);
//! let q = MeanFieldNormal::standard(1);
//! let cfg = AcceptanceConfig::new(0.0, 0.0).unwrap();
//! let batch =
//!     rejection_sample(&target, &[-1.0], &q, &cfg, &mut rng_from_seed(0), 8, None).unwrap();
//! assert_eq!(batch.s(), 8);
//! assert!(batch.a.iter().all(|&a| (a - 0.2689414213699951).abs() < 1e-15));
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{log_mean_exp, log_sigmoid, mean, sample_variance, sigmoid};
use crate::proposal::{NoiseDraw, Proposal};
use crate::target::Target;

/// Threshold high enough that acceptance saturates at 1 in double precision
/// for any log density ratio a real model can produce, recovering plain
/// variational inference over the proposal. A merely moderate shift is not
/// enough here: a freshly initialized proposal on a high-dimensional target
/// can sit hundreds of nats below it, and the warm start must still accept
/// every draw.
pub const PLAIN_VI_THRESHOLD: f64 = 1e300;

/// Default proposal budget per requested sample.
pub const DEFAULT_MAX_PROPOSALS_PER_SAMPLE: u64 = 1_000_000;

/// Acceptance rule: threshold plus guard floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceConfig {
    /// Log-odds shift `T` applied to the density ratio.
    pub threshold: f64,
    /// Guard floor `epsilon` in `[0, 1)`.
    pub epsilon: f64,
    zeta: f64,
}

/// Acceptance quantities at one point, all derived from the shifted log
/// ratio `u = log p - log q + T`.
#[derive(Debug, Clone, Copy)]
pub struct Acceptance {
    /// Shifted log density ratio.
    pub u: f64,
    /// Unguarded acceptance probability `sigmoid(u)`.
    pub a_raw: f64,
    /// Guarded acceptance probability `epsilon + (1 - epsilon) a_raw`.
    pub a: f64,
    /// `log a`, computed stably even where `a_raw` underflows.
    pub log_a: f64,
}

impl AcceptanceConfig {
    /// Acceptance rule with threshold `T` and guard `epsilon in [0, 1)`.
    pub fn new(threshold: f64, epsilon: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be finite, got {threshold}")));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0, 1), got {epsilon}")));
        }
        Ok(Self { threshold, epsilon, zeta: epsilon / (1.0 - epsilon) })
    }

    /// Accept-everything configuration: the sampler becomes a pass-through
    /// and the accepted-sample law is the proposal itself.
    pub fn plain_vi() -> Self {
        Self::new(PLAIN_VI_THRESHOLD, 0.0).expect("constants are valid")
    }

    /// Reparameterized guard `zeta = epsilon / (1 - epsilon)`, cached at
    /// construction. Exactly zero when the guard is off.
    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Updates the threshold in place, keeping the guard untouched.
    pub fn set_threshold(&mut self, threshold: f64) -> Result<()> {
        if !threshold.is_finite() {
            return Err(Error::Config(format!("threshold must be finite, got {threshold}")));
        }
        self.threshold = threshold;
        Ok(())
    }

    /// Evaluates the acceptance rule at log density ratio
    /// `log p(z) - log q(z)`.
    pub fn acceptance_parts(&self, log_ratio: f64) -> Acceptance {
        let u = log_ratio + self.threshold;
        let a_raw = sigmoid(u);
        if self.epsilon == 0.0 {
            Acceptance { u, a_raw, a: a_raw, log_a: log_sigmoid(u) }
        } else {
            let a = self.epsilon + (1.0 - self.epsilon) * a_raw;
            Acceptance { u, a_raw, a, log_a: a.ln() }
        }
    }
}

/// Acceptance probabilities `(a_raw, a)` at a point.
pub fn accept_prob<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    z: &[f64],
) -> Result<(f64, f64)>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let log_ratio = target.log_joint(theta, z)? - proposal.log_density(z);
    let acc = cfg.acceptance_parts(log_ratio);
    Ok((acc.a_raw, acc.a))
}

/// A batch of accepted samples with every per-sample quantity the gradient
/// estimators consume.
#[derive(Debug, Clone)]
pub struct AcceptedBatch {
    /// Accepted samples, in acceptance order.
    pub z: Vec<Vec<f64>>,
    /// Base noise that produced each sample.
    pub eps: Vec<NoiseDraw>,
    /// Target log density at each sample.
    pub log_p: Vec<f64>,
    /// Proposal log density at each sample.
    pub log_q: Vec<f64>,
    /// Unguarded acceptance probabilities.
    pub a_raw: Vec<f64>,
    /// Guarded acceptance probabilities.
    pub a: Vec<f64>,
    /// Per-sample bound integrand `A = log p - log q - log a`.
    pub elbo_integrand: Vec<f64>,
    /// Proposals consumed to land each accepted sample, the accept included.
    pub proposals_used: Vec<u64>,
}

impl AcceptedBatch {
    /// Number of accepted samples.
    pub fn s(&self) -> usize {
        self.z.len()
    }

    /// Total proposals the batch consumed.
    pub fn total_proposals(&self) -> u64 {
        self.proposals_used.iter().sum()
    }

    /// Acceptance-rate estimate: samples per proposal.
    pub fn acceptance_rate(&self) -> f64 {
        self.s() as f64 / self.total_proposals() as f64
    }

    /// Mean of the bound integrand, the sampling part of the evidence lower
    /// bound.
    pub fn mean_integrand(&self) -> f64 {
        mean(&self.elbo_integrand)
    }
}

/// Draws `s` accepted samples by rejection.
///
/// Each attempt consumes the proposal's noise (one standard Normal per
/// dimension) followed by one uniform, in that order, so sequences are
/// reproducible across implementations. `max_proposals` bounds the total
/// attempts for the whole batch and defaults to
/// [`DEFAULT_MAX_PROPOSALS_PER_SAMPLE`] per requested sample; exhausting it
/// fails with [`Error::BudgetExhausted`] rather than looping forever on a
/// mis-tuned threshold.
pub fn rejection_sample<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    s: usize,
    max_proposals: Option<u64>,
) -> Result<AcceptedBatch>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if s == 0 {
        return Err(Error::BatchTooSmall { s: 0, min: 1 });
    }
    let budget = max_proposals.unwrap_or(DEFAULT_MAX_PROPOSALS_PER_SAMPLE * s as u64);
    let mut batch = AcceptedBatch {
        z: Vec::with_capacity(s),
        eps: Vec::with_capacity(s),
        log_p: Vec::with_capacity(s),
        log_q: Vec::with_capacity(s),
        a_raw: Vec::with_capacity(s),
        a: Vec::with_capacity(s),
        elbo_integrand: Vec::with_capacity(s),
        proposals_used: Vec::with_capacity(s),
    };
    let mut used_total: u64 = 0;
    let mut used_since_accept: u64 = 0;
    while batch.s() < s {
        if used_total >= budget {
            return Err(Error::BudgetExhausted {
                accepted: batch.s(),
                needed: s,
                proposals_used: used_total,
                max_proposals: budget,
            });
        }
        let (z, eps) = proposal.sample_reparam(rng);
        used_total += 1;
        used_since_accept += 1;
        let log_q = proposal.log_density(&z);
        let log_p = target.log_joint(theta, &z)?;
        let acc = cfg.acceptance_parts(log_p - log_q);
        if acc.a.is_nan() {
            // A NaN acceptance probability rejects every coin flip, so it
            // would silently eat the whole budget; fail fast instead.
            return Err(Error::NonFinite { context: "acceptance probability", value: acc.a });
        }
        let coin: f64 = rng.gen();
        if coin < acc.a {
            batch.z.push(z);
            batch.eps.push(eps);
            batch.log_p.push(log_p);
            batch.log_q.push(log_q);
            batch.a_raw.push(acc.a_raw);
            batch.a.push(acc.a);
            batch.elbo_integrand.push(log_p - log_q - acc.log_a);
            batch.proposals_used.push(used_since_accept);
            used_since_accept = 0;
        }
    }
    Ok(batch)
}

/// Monte Carlo estimate of the acceptance normalizer `Z_r = E_q[a]`.
#[derive(Debug, Clone, Copy)]
pub struct ZrEstimate {
    /// Sample mean of the acceptance probability over proposal draws.
    pub estimate: f64,
    /// Standard error of the mean.
    pub standard_error: f64,
}

/// Estimates `Z_r = E_q[a]` from `m` plain proposal draws.
pub fn estimate_zr<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    m: usize,
) -> Result<ZrEstimate>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if m < 2 {
        return Err(Error::BatchTooSmall { s: m, min: 2 });
    }
    let mut a = Vec::with_capacity(m);
    for _ in 0..m {
        let (z, _) = proposal.sample_reparam(rng);
        let log_ratio = target.log_joint(theta, &z)? - proposal.log_density(&z);
        a.push(cfg.acceptance_parts(log_ratio).a);
    }
    Ok(ZrEstimate {
        estimate: mean(&a),
        standard_error: (sample_variance(&a) / m as f64).sqrt(),
    })
}

/// Estimates `log Z_r` from `m` plain proposal draws, staying in log space
/// so thresholds far below zero do not underflow.
pub fn estimate_log_zr<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    m: usize,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if m == 0 {
        return Err(Error::BatchTooSmall { s: 0, min: 1 });
    }
    let mut log_a = Vec::with_capacity(m);
    for _ in 0..m {
        let (z, _) = proposal.sample_reparam(rng);
        let log_ratio = target.log_joint(theta, &z)? - proposal.log_density(&z);
        log_a.push(cfg.acceptance_parts(log_ratio).log_a);
    }
    Ok(log_mean_exp(&log_a))
}

/// Evidence lower bound estimate from an accepted batch and an estimate of
/// `log Z_r`.
pub fn elbo_estimate(batch: &AcceptedBatch, log_zr: f64) -> f64 {
    batch.mean_integrand() + log_zr
}
