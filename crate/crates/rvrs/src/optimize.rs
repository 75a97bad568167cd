//! Training loops: plain variational warm start, the accepted-sample bound
//! optimizer, and threshold adaptation.
//!
//! All loops follow the same contract: every random draw comes from a
//! stream derived from an [`RngStreams`] root and a caller-chosen major
//! index, so a fit is reproducible bit for bit from `(seed, major)` alone
//! and evaluation checkpoints never disturb the training stream. Parameter
//! updates use Adam in ascent form; the threshold uses plain gradient
//! descent on the acceptance-rate gap. A non-finite update or batch
//! statistic aborts the fit with [`Error::Diverged`] carrying the last
//! finite state.

use crate::error::{Error, LastGoodState, Result};
use crate::gradients::{
    estimate_gradients, stl_phi_gradient, t_gradient, theta_gradient_direct, theta_gradient_full,
    vrs_phi_gradient, ThetaEstimator,
};
use crate::proposal::Proposal;
use crate::rng::RngStreams;
use crate::sampler::{elbo_estimate, rejection_sample, AcceptanceConfig};
use crate::target::Target;

/// First-moment decay of the Adam updates.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay of the Adam updates.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator floor of the Adam updates.
pub const ADAM_EPS: f64 = 1e-8;

/// Adam accumulator for one parameter block, stepping in ascent direction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        Self { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// Applies one ascent step `params += lr * mhat / (sqrt(vhat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape { expected: self.m.len(), got: grad.len() });
        }
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grad[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Piecewise-constant decay: full rate for the first third of the run, a
/// tenth for the second, a hundredth for the rest (integer-division
/// boundaries).
pub fn lr_schedule(base: f64, iter: u64, total: u64) -> f64 {
    if iter < total / 3 {
        base
    } else if iter < 2 * total / 3 {
        base / 10.0
    } else {
        base / 100.0
    }
}

/// Settings for the plain variational warm start.
#[derive(Debug, Clone)]
pub struct MfConfig {
    /// Number of optimizer steps.
    pub iters: u64,
    /// Samples per step.
    pub s: usize,
    /// Constant Adam learning rate.
    pub lr: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self { iters: 3000, s: 8, lr: 1e-3 }
    }
}

/// Settings for the accepted-sample bound optimizer.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Number of optimizer steps.
    pub total_iters: u64,
    /// Accepted samples per step.
    pub s: usize,
    /// Target acceptance rate the threshold adapts toward.
    pub z_tgt: f64,
    /// Acceptance guard floor.
    pub epsilon: f64,
    /// Base Adam learning rate, decayed by [`lr_schedule`].
    pub base_lr: f64,
    /// Model-parameter estimator, or `None` to hold `theta` fixed.
    pub learn_theta: Option<ThetaEstimator>,
    /// Proposal budget per batch; `None` scales the sampler default.
    pub max_proposals: Option<u64>,
    /// Evaluation cadence in steps; `None` evaluates only at the end.
    pub eval_every: Option<u64>,
    /// Accepted samples per evaluation; `0` disables evaluation.
    pub eval_samples: usize,
    /// Learning rate of the threshold descent step.
    pub threshold_lr: f64,
    /// Proposal draws used to center the initial threshold.
    pub t_init_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 10_000,
            s: 2,
            z_tgt: 0.5,
            epsilon: 1e-4,
            base_lr: 1e-3,
            learn_theta: None,
            max_proposals: None,
            eval_every: None,
            eval_samples: 20_000,
            threshold_lr: 1.0,
            t_init_samples: 1000,
        }
    }
}

/// One row of the per-step training trace.
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    /// Step index.
    pub iter: u64,
    /// Batch mean of the bound integrand `A`.
    pub elbo_proxy: f64,
    /// Threshold used to draw this step's batch.
    pub threshold: f64,
    /// Acceptance-rate estimate of the normalizer from this step's batch.
    pub zr_hat: f64,
    /// Learning rate applied this step.
    pub lr: f64,
}

/// One row of the warm-start trace.
#[derive(Debug, Clone, Copy)]
pub struct MfTraceRow {
    /// Step index.
    pub iter: u64,
    /// Batch mean of `log p - log q`.
    pub elbo_proxy: f64,
    /// Learning rate applied this step.
    pub lr: f64,
}

/// A held-out bound estimate taken during or after training.
#[derive(Debug, Clone, Copy)]
pub struct EvalPoint {
    /// Step at which the evaluation ran.
    pub iter: u64,
    /// Bound estimate `mean(A) + log zr_hat` from a fresh batch.
    pub elbo: f64,
    /// Acceptance-rate estimate of the normalizer.
    pub zr_hat: f64,
}

/// Everything a finished fit hands back to the caller.
#[derive(Debug, Clone)]
pub struct RvrsFit<P> {
    /// Proposal at the final parameters.
    pub proposal: P,
    /// Final acceptance settings, threshold included.
    pub acceptance: AcceptanceConfig,
    /// Final model parameters (the initial ones when not learned).
    pub theta: Vec<f64>,
    /// Threshold the run started from.
    pub t_init: f64,
    /// Per-step training trace.
    pub trace: Vec<TraceRow>,
    /// Held-out bound estimates, the final state always last.
    pub evals: Vec<EvalPoint>,
}

// Stream minors within one fit's major index.
const MINOR_TRAIN: u64 = 0;
const MINOR_T_INIT: u64 = 1;
const MINOR_EVAL_BASE: u64 = 2;

/// Centers the threshold so the shifted log ratio starts near zero:
/// `-mean(log p - log q)` over `n` proposal draws.
pub fn initial_threshold<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    rng: &mut dyn rand::RngCore,
    n: usize,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if n == 0 {
        return Err(Error::BatchTooSmall { s: 0, min: 1 });
    }
    let mut acc = 0.0;
    for _ in 0..n {
        let (z, _) = proposal.sample_reparam(rng);
        acc += target.log_joint(theta, &z)? - proposal.log_density(&z);
    }
    Ok(-acc / n as f64)
}

/// Draws a fresh batch and reports the paired bound estimate
/// `mean(A) + log(accepted / proposed)`.
pub fn evaluate<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    acceptance: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    samples: usize,
    max_proposals: Option<u64>,
) -> Result<EvalPoint>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let batch = rejection_sample(target, theta, proposal, acceptance, rng, samples, max_proposals)?;
    let zr_hat = batch.acceptance_rate();
    Ok(EvalPoint { iter: 0, elbo: elbo_estimate(&batch, zr_hat.ln()), zr_hat })
}

fn all_finite(xs: &[f64]) -> bool {
    xs.iter().all(|x| x.is_finite())
}

/// Fits a proposal by plain reparameterized variational inference with the
/// score term of `grad log q` dropped. Used as the warm start before
/// rejection is switched on.
pub fn fit_meanfield<T, P>(
    target: &T,
    theta: &[f64],
    init: P,
    cfg: &MfConfig,
    streams: RngStreams,
    major: u64,
) -> Result<(P, Vec<MfTraceRow>)>
where
    T: Target + ?Sized,
    P: Proposal + Clone,
{
    let mut proposal = init;
    let acceptance = AcceptanceConfig::plain_vi();
    let mut rng = streams.keyed(major, MINOR_TRAIN);
    let mut adam = AdamState::new(proposal.param_len());
    let mut params = proposal.params_flat();
    let mut last_good = params.clone();
    let mut trace = Vec::with_capacity(cfg.iters as usize);
    for iter in 0..cfg.iters {
        let batch = match rejection_sample(target, theta, &proposal, &acceptance, &mut rng, cfg.s, None)
        {
            Ok(b) => b,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    iter,
                    last_good: Box::new(LastGoodState {
                        params: last_good,
                        threshold: 0.0,
                        theta: theta.to_vec(),
                        iter: iter.saturating_sub(1),
                    }),
                });
            }
            Err(e) => return Err(e),
        };
        let grad = stl_phi_gradient(target, theta, &proposal, &batch)?;
        let elbo_proxy = batch.mean_integrand();
        adam.step(&mut params, &grad, cfg.lr)?;
        if !elbo_proxy.is_finite() || !all_finite(&params) {
            return Err(Error::Diverged {
                iter,
                last_good: Box::new(LastGoodState {
                    params: last_good,
                    threshold: 0.0,
                    theta: theta.to_vec(),
                    iter,
                }),
            });
        }
        proposal.set_params_flat(&params)?;
        last_good.clone_from(&params);
        trace.push(MfTraceRow { iter, elbo_proxy, lr: cfg.lr });
    }
    Ok((proposal, trace))
}

enum PhiRoute {
    Pathwise,
    ScoreFunction,
}

fn fit_accepted_loop<T, P>(
    route: PhiRoute,
    target: &T,
    theta0: &[f64],
    init: P,
    cfg: &TrainConfig,
    streams: RngStreams,
    major: u64,
) -> Result<RvrsFit<P>>
where
    T: Target + ?Sized,
    P: Proposal + Clone,
{
    let mut proposal = init;
    let mut theta = theta0.to_vec();
    let t_init = initial_threshold(
        target,
        &theta,
        &proposal,
        &mut streams.keyed(major, MINOR_T_INIT),
        cfg.t_init_samples,
    )?;
    let mut acceptance = AcceptanceConfig::new(t_init, cfg.epsilon)?;

    let mut rng = streams.keyed(major, MINOR_TRAIN);
    let mut params = proposal.params_flat();
    let mut adam_phi = AdamState::new(params.len());
    let mut adam_theta = AdamState::new(theta.len());
    let mut last_good = LastGoodState {
        params: params.clone(),
        threshold: acceptance.threshold,
        theta: theta.clone(),
        iter: 0,
    };
    let mut trace = Vec::with_capacity(cfg.total_iters as usize);
    let mut evals = Vec::new();

    let run_eval = |iter: u64,
                    proposal: &P,
                    theta: &[f64],
                    acceptance: &AcceptanceConfig,
                    evals: &mut Vec<EvalPoint>|
     -> Result<()> {
        if cfg.eval_samples == 0 {
            return Ok(());
        }
        let mut eval_rng = streams.keyed(major, MINOR_EVAL_BASE + iter);
        let mut point = evaluate(
            target,
            theta,
            proposal,
            acceptance,
            &mut eval_rng,
            cfg.eval_samples,
            None,
        )?;
        point.iter = iter;
        evals.push(point);
        Ok(())
    };

    for iter in 0..cfg.total_iters {
        if let Some(every) = cfg.eval_every {
            if every > 0 && iter % every == 0 {
                run_eval(iter, &proposal, &theta, &acceptance, &mut evals)?;
            }
        }

        let threshold_used = acceptance.threshold;
        let batch = match rejection_sample(
            target,
            &theta,
            &proposal,
            &acceptance,
            &mut rng,
            cfg.s,
            cfg.max_proposals,
        ) {
            Ok(b) => b,
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged { iter, last_good: Box::new(last_good) });
            }
            Err(e) => return Err(e),
        };
        let lr = lr_schedule(cfg.base_lr, iter, cfg.total_iters);

        // All gradients come from this one batch before anything moves.
        let (d_phi, d_theta) = match route {
            PhiRoute::Pathwise => {
                let est = estimate_gradients(
                    target,
                    &theta,
                    &proposal,
                    &acceptance,
                    &batch,
                    cfg.learn_theta,
                    None,
                )?;
                (est.d_phi, est.d_theta)
            }
            PhiRoute::ScoreFunction => {
                let d_phi = vrs_phi_gradient(&proposal, &acceptance, &batch)?;
                let d_theta = match cfg.learn_theta {
                    None => None,
                    Some(ThetaEstimator::Direct) => {
                        Some(theta_gradient_direct(target, &theta, &batch)?)
                    }
                    Some(ThetaEstimator::Full) => {
                        Some(theta_gradient_full(target, &theta, &acceptance, &batch)?)
                    }
                };
                (d_phi, d_theta)
            }
        };
        let d_t = t_gradient(&batch, cfg.z_tgt)?;
        let elbo_proxy = batch.mean_integrand();

        adam_phi.step(&mut params, &d_phi, lr)?;
        if let Some(g) = &d_theta {
            adam_theta.step(&mut theta, g, lr)?;
        }
        let new_threshold = acceptance.threshold - cfg.threshold_lr * d_t;

        if !elbo_proxy.is_finite()
            || !all_finite(&params)
            || !all_finite(&theta)
            || !new_threshold.is_finite()
        {
            return Err(Error::Diverged { iter, last_good: Box::new(last_good) });
        }
        proposal.set_params_flat(&params)?;
        acceptance.set_threshold(new_threshold)?;

        trace.push(TraceRow {
            iter,
            elbo_proxy,
            threshold: threshold_used,
            zr_hat: batch.acceptance_rate(),
            lr,
        });
        last_good.params.clone_from(&params);
        last_good.theta.clone_from(&theta);
        last_good.threshold = acceptance.threshold;
        last_good.iter = iter;
    }

    run_eval(cfg.total_iters, &proposal, &theta, &acceptance, &mut evals)?;
    Ok(RvrsFit { proposal, acceptance, theta, t_init, trace, evals })
}

/// Trains a proposal and threshold on the accepted-sample bound with the
/// pathwise gradient.
pub fn fit_rvrs<T, P>(
    target: &T,
    theta0: &[f64],
    init: P,
    cfg: &TrainConfig,
    streams: RngStreams,
    major: u64,
) -> Result<RvrsFit<P>>
where
    T: Target + ?Sized,
    P: Proposal + Clone,
{
    fit_accepted_loop(PhiRoute::Pathwise, target, theta0, init, cfg, streams, major)
}

/// Trains a proposal and threshold on the accepted-sample bound with the
/// score-function gradient.
pub fn fit_vrs<T, P>(
    target: &T,
    theta0: &[f64],
    init: P,
    cfg: &TrainConfig,
    streams: RngStreams,
    major: u64,
) -> Result<RvrsFit<P>>
where
    T: Target + ?Sized,
    P: Proposal + Clone,
{
    fit_accepted_loop(PhiRoute::ScoreFunction, target, theta0, init, cfg, streams, major)
}

/// Adapts only the threshold toward a target acceptance rate, holding the
/// proposal and model fixed. Returns the trajectory including the starting
/// point; callers typically tail-average it.
pub fn adapt_threshold<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    start: &AcceptanceConfig,
    rng: &mut dyn rand::RngCore,
    steps: u64,
    s: usize,
    z_tgt: f64,
    lr: f64,
) -> Result<Vec<f64>>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let mut acceptance = *start;
    let mut path = Vec::with_capacity(steps as usize + 1);
    path.push(acceptance.threshold);
    for _ in 0..steps {
        let batch = rejection_sample(target, theta, proposal, &acceptance, rng, s, None)?;
        let g = t_gradient(&batch, z_tgt)?;
        let t = acceptance.threshold - lr * g;
        if !t.is_finite() {
            return Err(Error::Config(format!("threshold adaptation produced {t}")));
        }
        acceptance.set_threshold(t)?;
        path.push(t);
    }
    Ok(path)
}
