//! Experiment drivers behind the command-line harness.
//!
//! Each driver reads its keys from a flat [`Config`], validates everything
//! before any compute starts, runs a deterministic computation seeded only
//! by the run seed, and writes its artifacts (trace CSVs, result tables,
//! `summary.json`, `metrics.csv`) into the output directory. Every metric
//! in the summary also appears in one of the CSV tables.
//!
//! Work that is independent across grid points (thresholds, dimensions,
//! replicate seeds) goes through [`parallel_map`]; each unit derives its own
//! stream family via [`derive_seed`], so results are bitwise identical no
//! matter how many workers run them.

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gradients::{rvrs_phi_gradient, vrs_phi_gradient};
use crate::math::{mean, median, RunningMomentsVec};
use crate::optimize::{
    evaluate, fit_meanfield, fit_rvrs, fit_vrs, MfConfig, RvrsFit, TrainConfig,
};
use crate::oracle::{check_prop2, quad_zr, QuadratureGrid};
use crate::output::{
    fmt_f64, read_meanfield_params, write_csv, write_meanfield_params, write_mf_trace,
    write_trace, RunSummary,
};
use crate::proposal::{MeanFieldNormal, Proposal};
use crate::rng::{derive_seed, RngStreams};
use crate::sampler::{rejection_sample, AcceptanceConfig};
use crate::semi::{
    evaluate_semi, fit_semi, LocalSampler, SemiProposal, SemiTrainConfig,
};
use crate::target::{
    load_numeric_table, AnalyticGaussianTarget, FunnelTarget, HierStudentTModel,
    LogisticRegressionTarget, Target,
};
use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

/// The experiments the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    /// Mean-field baseline vs accepted-sample fits on the funnel density,
    /// with a density grid for plotting.
    Funnel,
    /// Pathwise-vs-score gradient variance ratios on logistic targets.
    Gradvar,
    /// Acceptance-target sweep on the funnel.
    SweepZ,
    /// Bayesian logistic regression with all three trainers.
    Logreg,
    /// Structured global/local inference on the heavy-tailed regression
    /// model, against its integrated-model oracle.
    Semi,
    /// Numerical check of the optimality-gap bound on Gaussian instances.
    BoundCheck,
    /// Re-evaluate a saved proposal on a named target.
    Eval,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Funnel,
        Experiment::Gradvar,
        Experiment::SweepZ,
        Experiment::Logreg,
        Experiment::Semi,
        Experiment::BoundCheck,
        Experiment::Eval,
    ];

    /// The name used on the command line and in config files.
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Funnel => "funnel",
            Experiment::Gradvar => "gradvar",
            Experiment::SweepZ => "sweep-z",
            Experiment::Logreg => "logreg",
            Experiment::Semi => "semi",
            Experiment::BoundCheck => "bound-check",
            Experiment::Eval => "eval",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|e| e.name()).collect();
                Error::Config(format!(
                    "unknown experiment {name:?}; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Where and how a run executes.
#[derive(Debug, Clone)]
pub struct RunContext {
    /// Root seed; all randomness in the run derives from it.
    pub seed: u64,
    /// Directory that receives every artifact.
    pub out_dir: PathBuf,
    /// Worker threads for grid-parallel sections.
    pub workers: usize,
}

/// Resolves seed and output directory with command-line flags taking
/// precedence over config keys, consuming those keys from the config.
pub fn resolve_context(
    cfg: &mut Config,
    experiment: Experiment,
    seed_flag: Option<u64>,
    out_flag: Option<PathBuf>,
    workers: usize,
) -> Result<RunContext> {
    let seed = match seed_flag {
        Some(s) => {
            let _ = cfg.get_u64("seed")?;
            s
        }
        None => cfg.u64_or("seed", 0)?,
    };
    let out_dir = match out_flag {
        Some(p) => {
            let _ = cfg.get_path("output_dir");
            p
        }
        None => cfg
            .get_path("output_dir")
            .unwrap_or_else(|| PathBuf::from("runs").join(experiment.name())),
    };
    Ok(RunContext { seed, out_dir, workers: workers.max(1) })
}

/// Runs `experiment` with `cfg`, writes all artifacts into `ctx.out_dir`,
/// and returns the summary.
pub fn run(experiment: Experiment, mut cfg: Config, ctx: &RunContext) -> Result<RunSummary> {
    if let Some(name) = cfg.get_str("experiment") {
        if name != experiment.name() {
            return Err(Error::Config(format!(
                "config is for experiment {name:?} but {:?} was requested",
                experiment.name()
            )));
        }
    }
    std::fs::create_dir_all(&ctx.out_dir)?;
    let started = Instant::now();
    let mut summary = match experiment {
        Experiment::Funnel => run_funnel(&mut cfg, ctx),
        Experiment::Gradvar => run_gradvar(&mut cfg, ctx),
        Experiment::SweepZ => run_sweep_z(&mut cfg, ctx),
        Experiment::Logreg => run_logreg(&mut cfg, ctx),
        Experiment::Semi => run_semi(&mut cfg, ctx),
        Experiment::BoundCheck => run_bound_check(&mut cfg, ctx),
        Experiment::Eval => run_eval(&mut cfg, ctx),
    }?;
    summary.wall_time_seconds = started.elapsed().as_secs_f64();
    summary.write(&ctx.out_dir)?;
    Ok(summary)
}

/// Applies `f` to every item, fanning out over at most `workers` threads.
///
/// Results come back in input order and each item must carry its own
/// randomness, so the output does not depend on the worker count. The first
/// error wins; remaining items still run to completion.
pub fn parallel_map<T, R, F>(items: Vec<T>, workers: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let n = items.len();
    let workers = workers.max(1).min(n.max(1));
    if workers <= 1 {
        return items.into_iter().map(f).collect();
    }
    let queue: Mutex<VecDeque<(usize, T)>> =
        Mutex::new(items.into_iter().enumerate().collect());
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    let first_err: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                scope.spawn(|| loop {
                    let next = queue.lock().expect("queue lock").pop_front();
                    let Some((i, item)) = next else { return };
                    match f(item) {
                        Ok(r) => slots.lock().expect("slot lock")[i] = Some(r),
                        Err(e) => {
                            let mut err = first_err.lock().expect("error lock");
                            // Keep the error from the lowest item index so
                            // reruns fail identically regardless of timing.
                            if err.is_none() {
                                *err = Some(e);
                            }
                        }
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().expect("worker panicked");
        }
    });
    if let Some(e) = first_err.into_inner().expect("error lock") {
        return Err(e);
    }
    Ok(slots
        .into_inner()
        .expect("slot lock")
        .into_iter()
        .map(|r| r.expect("all slots filled when no error"))
        .collect())
}

/// Monte Carlo estimate of the plain VI bound `E_q[log p - log q]`.
fn mc_plain_elbo<T: Target + ?Sized, P: Proposal + ?Sized>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    rng: &mut dyn rand::RngCore,
    samples: usize,
) -> Result<f64> {
    let mut acc = 0.0;
    for _ in 0..samples {
        let (z, _) = proposal.sample_reparam(rng);
        acc += target.log_joint(theta, &z)? - proposal.log_density(&z);
    }
    Ok(acc / samples as f64)
}

/// Geometric mean of the proposal's per-coordinate standard deviations.
fn gmean_scale(q: &MeanFieldNormal) -> f64 {
    mean(&q.log_scale).exp()
}

/// Renders a threshold-target value for file names (`0.05` -> `z0.05`).
fn z_label(z: f64) -> String {
    format!("z{z}")
}

struct FitOutcome {
    fit: RvrsFit<MeanFieldNormal>,
    elbo: f64,
    zr_hat: f64,
}

fn final_eval_of(fit: &RvrsFit<MeanFieldNormal>) -> Result<(f64, f64)> {
    let last = fit
        .evals
        .last()
        .ok_or_else(|| Error::Config("fit produced no evaluations".into()))?;
    Ok((last.elbo, last.zr_hat))
}

// ---------------------------------------------------------------------------
// funnel

fn run_funnel(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let z_list = cfg.f64_list_or("z_tgt_list", &[0.5, 0.05])?;
    let total_iters = cfg.u64_or("total_iters", 20_000)?;
    let s = cfg.usize_or("s", 2)?;
    let epsilon = cfg.f64_or("epsilon", 1e-4)?;
    let base_lr = cfg.f64_or("base_lr", 1e-3)?;
    let threshold_lr = cfg.f64_or("threshold_lr", 1.0)?;
    let t_init_samples = cfg.usize_or("t_init_samples", 1000)?;
    let eval_every = cfg.u64_or("eval_every", 1000)?;
    let eval_samples = cfg.usize_or("eval_samples", 20_000)?;
    let mf_iters = cfg.u64_or("mf_iters", 3000)?;
    let mf_s = cfg.usize_or("mf_s", 8)?;
    let mf_lr = cfg.f64_or("mf_lr", 1e-3)?;
    let grid_nodes = cfg.usize_or("grid_nodes", 201)?;
    let grid_half_width = cfg.f64_or("grid_half_width", 6.0)?;
    cfg.ensure_consumed()?;

    let target = FunnelTarget::new();
    let mut summary = RunSummary::new("funnel", ctx.seed, cfg.echo());

    let mf_cfg = MfConfig { iters: mf_iters, s: mf_s, lr: mf_lr };
    let (mf_q, mf_trace) = fit_meanfield(
        &target,
        &[],
        MeanFieldNormal::standard(2),
        &mf_cfg,
        RngStreams::new(derive_seed(ctx.seed, 0)),
        0,
    )?;
    write_mf_trace(&ctx.out_dir.join("mf_trace.csv"), &mf_trace)?;
    summary.push_trace("mf_trace.csv");
    let mf_grid = QuadratureGrid::for_proposal(&mf_q, 10.0, 801)?;
    let mf_elbo = crate::oracle::quad_elbo(
        &target,
        &[],
        &mf_q,
        &AcceptanceConfig::plain_vi(),
        &mf_grid,
    )?;

    let train = |(i, z_tgt): (usize, f64)| -> Result<FitOutcome> {
        let cfg = TrainConfig {
            total_iters,
            s,
            z_tgt,
            epsilon,
            base_lr,
            eval_every: Some(eval_every),
            eval_samples,
            threshold_lr,
            t_init_samples,
            ..TrainConfig::default()
        };
        let fit = fit_rvrs(
            &target,
            &[],
            MeanFieldNormal::standard(2),
            &cfg,
            RngStreams::new(derive_seed(ctx.seed, 1 + i as u64)),
            0,
        )?;
        let (elbo, zr_hat) = final_eval_of(&fit)?;
        Ok(FitOutcome { fit, elbo, zr_hat })
    };
    let jobs: Vec<(usize, f64)> = z_list.iter().copied().enumerate().collect();
    let outcomes = parallel_map(jobs, ctx.workers, train)?;

    let mut rows = vec![vec![
        "mf".to_string(),
        fmt_f64(mf_elbo),
        fmt_f64(f64::INFINITY),
        fmt_f64(1.0),
        fmt_f64(gmean_scale(&mf_q)),
    ]];
    summary.push_metric("elbo_mf_quad", mf_elbo);
    summary.push_metric("gmean_scale_mf", gmean_scale(&mf_q));

    for (&z_tgt, out) in z_list.iter().zip(&outcomes) {
        let label = z_label(z_tgt);
        let trace_name = format!("trace_{label}.csv");
        write_trace(&ctx.out_dir.join(&trace_name), &out.fit.trace)?;
        summary.push_trace(&trace_name);

        let evals_name = format!("evals_{label}.csv");
        let eval_rows: Vec<Vec<String>> = out
            .fit
            .evals
            .iter()
            .map(|e| vec![e.iter.to_string(), fmt_f64(e.elbo), fmt_f64(e.zr_hat)])
            .collect();
        write_csv(&ctx.out_dir.join(&evals_name), &["iter", "elbo", "Zr_hat"], &eval_rows)?;
        summary.push_trace(&evals_name);

        let params_name = format!("params_{label}.kv");
        write_meanfield_params(
            &ctx.out_dir.join(&params_name),
            &out.fit.proposal,
            out.fit.acceptance.threshold,
            out.fit.acceptance.epsilon,
        )?;

        write_density_grid(
            &ctx.out_dir.join(format!("grid_{label}.csv")),
            &target,
            &out.fit.proposal,
            &out.fit.acceptance,
            grid_half_width,
            grid_nodes,
        )?;
        summary.push_trace(&format!("grid_{label}.csv"));

        rows.push(vec![
            label.clone(),
            fmt_f64(out.elbo),
            fmt_f64(out.fit.acceptance.threshold),
            fmt_f64(out.zr_hat),
            fmt_f64(gmean_scale(&out.fit.proposal)),
        ]);
        summary.push_metric(&format!("elbo_{label}"), out.elbo);
        summary.push_metric(&format!("t_{label}"), out.fit.acceptance.threshold);
        summary.push_metric(&format!("zr_hat_{label}"), out.zr_hat);
        summary.push_metric(&format!("gmean_scale_{label}"), gmean_scale(&out.fit.proposal));
    }
    write_csv(
        &ctx.out_dir.join("results.csv"),
        &["label", "elbo", "T", "Zr_hat", "gmean_scale"],
        &rows,
    )?;
    summary.push_trace("results.csv");
    Ok(summary)
}

/// Writes the `(x, y, log r, log q, a)` grid used for density plots. The
/// sculpted density is `r = q a / Z_r` with `Z_r` from quadrature.
fn write_density_grid(
    path: &Path,
    target: &FunnelTarget,
    proposal: &MeanFieldNormal,
    acceptance: &AcceptanceConfig,
    half_width: f64,
    nodes: usize,
) -> Result<()> {
    if nodes < 2 {
        return Err(Error::Config(format!("grid_nodes must be at least 2, got {nodes}")));
    }
    let zr_grid = QuadratureGrid::for_proposal(proposal, 10.0, 801)?;
    let log_zr = quad_zr(target, &[], proposal, acceptance, &zr_grid)?.ln();
    let mut rows = Vec::with_capacity(nodes * nodes);
    let coord = |i: usize| -half_width + 2.0 * half_width * i as f64 / (nodes - 1) as f64;
    for ix in 0..nodes {
        for iy in 0..nodes {
            let z = [coord(ix), coord(iy)];
            let log_q = proposal.log_density(&z);
            let acc = acceptance.acceptance_parts(target.log_joint(&[], &z)? - log_q);
            let log_r = log_q + acc.log_a - log_zr;
            rows.push(vec![
                fmt_f64(z[0]),
                fmt_f64(z[1]),
                fmt_f64(log_r),
                fmt_f64(log_q),
                fmt_f64(acc.a),
            ]);
        }
    }
    write_csv(path, &["x", "y", "log_r", "log_q", "a"], &rows)
}

// ---------------------------------------------------------------------------
// gradvar

struct GradvarRow {
    d: usize,
    threshold: f64,
    per_coord: Vec<(f64, f64)>,
    median_mu_ratio: f64,
    median_scale_ratio: f64,
    min_ratio: f64,
}

/// Variance comparison between the pathwise and score-function estimators
/// on one logistic target, at a threshold matched to the mean-field bound.
pub fn gradvar_instance(
    d: usize,
    n: usize,
    feature_scale: f64,
    m_batches: usize,
    s: usize,
    epsilon: f64,
    streams: RngStreams,
) -> Result<(f64, Vec<(f64, f64)>)> {
    let target = LogisticRegressionTarget::synthetic(n, d, feature_scale, streams.seed());
    let mf_cfg = MfConfig { iters: 1000, s: 8, lr: 1e-3 };
    let (q, _) = fit_meanfield(&target, &[], MeanFieldNormal::standard(d), &mf_cfg, streams, 0)?;
    let elbo = mc_plain_elbo(&target, &[], &q, &mut streams.keyed(1, 0), 20_000)?;
    let threshold = -elbo;
    let acceptance = AcceptanceConfig::new(threshold, epsilon)?;

    let mut rvrs_moments = RunningMomentsVec::new(q.param_len());
    let mut vrs_moments = RunningMomentsVec::new(q.param_len());
    for b in 0..m_batches {
        let mut rng = streams.keyed(2, b as u64);
        let batch = rejection_sample(&target, &[], &q, &acceptance, &mut rng, s, None)?;
        rvrs_moments.push(&rvrs_phi_gradient(&target, &[], &q, &acceptance, &batch)?)?;
        vrs_moments.push(&vrs_phi_gradient(&q, &acceptance, &batch)?)?;
    }
    let per_coord = vrs_moments
        .variances()
        .into_iter()
        .zip(rvrs_moments.variances())
        .collect();
    Ok((threshold, per_coord))
}

fn run_gradvar(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let d_list = cfg.usize_list_or("d_list", &[10, 30, 60])?;
    let n = cfg.usize_or("n", 100)?;
    let feature_scale = cfg.f64_or("feature_scale", 0.5)?;
    let m_batches = cfg.usize_or("m_batches", 500_000)?;
    let s = cfg.usize_or("s", 2)?;
    let epsilon = cfg.f64_or("epsilon", 1e-4)?;
    cfg.ensure_consumed()?;

    let mut summary = RunSummary::new("gradvar", ctx.seed, cfg.echo());
    let jobs: Vec<usize> = d_list.clone();
    let rows = parallel_map(jobs, ctx.workers, |d| -> Result<GradvarRow> {
        let streams = RngStreams::new(derive_seed(ctx.seed, d as u64));
        let (threshold, per_coord) =
            gradvar_instance(d, n, feature_scale, m_batches, s, epsilon, streams)?;
        let ratios: Vec<f64> = per_coord.iter().map(|(v, r)| v / r).collect();
        let median_mu_ratio = median(&ratios[..d]);
        let median_scale_ratio = median(&ratios[d..]);
        let min_ratio = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(GradvarRow { d, threshold, per_coord, median_mu_ratio, median_scale_ratio, min_ratio })
    })?;

    let mut table = Vec::new();
    for row in &rows {
        let per_coord_name = format!("gradvar_d{}.csv", row.d);
        let coord_rows: Vec<Vec<String>> = row
            .per_coord
            .iter()
            .enumerate()
            .map(|(i, (var_vrs, var_rvrs))| {
                vec![
                    i.to_string(),
                    (if i < row.d { "mean" } else { "scale" }).to_string(),
                    fmt_f64(*var_vrs),
                    fmt_f64(*var_rvrs),
                    fmt_f64(var_vrs / var_rvrs),
                ]
            })
            .collect();
        write_csv(
            &ctx.out_dir.join(&per_coord_name),
            &["coord", "kind", "var_vrs", "var_rvrs", "ratio"],
            &coord_rows,
        )?;
        summary.push_trace(&per_coord_name);

        table.push(vec![
            row.d.to_string(),
            fmt_f64(row.threshold),
            fmt_f64(row.median_mu_ratio),
            fmt_f64(row.median_scale_ratio),
            fmt_f64(row.min_ratio),
        ]);
        summary.push_metric(&format!("threshold_d{}", row.d), row.threshold);
        summary.push_metric(&format!("median_mu_ratio_d{}", row.d), row.median_mu_ratio);
        summary.push_metric(&format!("median_scale_ratio_d{}", row.d), row.median_scale_ratio);
        summary.push_metric(&format!("min_ratio_d{}", row.d), row.min_ratio);
    }
    write_csv(
        &ctx.out_dir.join("results.csv"),
        &["d", "threshold", "median_mu_ratio", "median_scale_ratio", "min_ratio"],
        &table,
    )?;
    summary.push_trace("results.csv");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// sweep-z

fn run_sweep_z(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let z_list = cfg.f64_list_or("z_tgt_list", &[0.4, 0.2, 0.1, 0.05])?;
    let n_seeds = cfg.usize_or("n_seeds", 3)?;
    let total_iters = cfg.u64_or("total_iters", 250_000)?;
    let s = cfg.usize_or("s", 2)?;
    let epsilon = cfg.f64_or("epsilon", 1e-6)?;
    let base_lr = cfg.f64_or("base_lr", 3e-4)?;
    let threshold_lr = cfg.f64_or("threshold_lr", 1.0)?;
    let t_init_samples = cfg.usize_or("t_init_samples", 1000)?;
    let eval_samples = cfg.usize_or("eval_samples", 20_000)?;
    cfg.ensure_consumed()?;

    let target = FunnelTarget::new();
    let mut summary = RunSummary::new("sweep-z", ctx.seed, cfg.echo());

    let mut jobs = Vec::new();
    for r in 0..n_seeds {
        for (j, &z_tgt) in z_list.iter().enumerate() {
            jobs.push((r, j, z_tgt));
        }
    }
    let n_z = z_list.len();
    let results = parallel_map(jobs, ctx.workers, |(r, j, z_tgt)| -> Result<_> {
        let cfg = TrainConfig {
            total_iters,
            s,
            z_tgt,
            epsilon,
            base_lr,
            eval_samples,
            threshold_lr,
            t_init_samples,
            ..TrainConfig::default()
        };
        let fit = fit_rvrs(
            &target,
            &[],
            MeanFieldNormal::standard(2),
            &cfg,
            RngStreams::new(derive_seed(ctx.seed, 1 + (r * n_z + j) as u64)),
            0,
        )?;
        let (elbo, zr_hat) = final_eval_of(&fit)?;
        Ok((r, z_tgt, elbo, gmean_scale(&fit.proposal), fit.acceptance.threshold, zr_hat))
    })?;

    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|(r, z, elbo, scale, t, zr)| {
            vec![
                r.to_string(),
                fmt_f64(*z),
                fmt_f64(*elbo),
                fmt_f64(*scale),
                fmt_f64(*t),
                fmt_f64(*zr),
            ]
        })
        .collect();
    write_csv(
        &ctx.out_dir.join("sweep.csv"),
        &["seed", "z_tgt", "elbo", "gmean_scale", "T", "Zr_hat"],
        &rows,
    )?;
    summary.push_trace("sweep.csv");

    let mut median_rows = Vec::new();
    for (j, &z_tgt) in z_list.iter().enumerate() {
        let of = |f: &dyn Fn(&(usize, f64, f64, f64, f64, f64)) -> f64| -> f64 {
            let vals: Vec<f64> = results
                .iter()
                .enumerate()
                .filter(|(k, _)| k % n_z == j)
                .map(|(_, row)| f(row))
                .collect();
            median(&vals)
        };
        let elbo = of(&|row| row.2);
        let scale = of(&|row| row.3);
        let t = of(&|row| row.4);
        let zr = of(&|row| row.5);
        median_rows.push(vec![
            fmt_f64(z_tgt),
            fmt_f64(elbo),
            fmt_f64(scale),
            fmt_f64(t),
            fmt_f64(zr),
        ]);
        let label = z_label(z_tgt);
        summary.push_metric(&format!("elbo_{label}"), elbo);
        summary.push_metric(&format!("gmean_scale_{label}"), scale);
        summary.push_metric(&format!("t_{label}"), t);
        summary.push_metric(&format!("zr_hat_{label}"), zr);
    }
    write_csv(
        &ctx.out_dir.join("sweep_median.csv"),
        &["z_tgt", "elbo", "gmean_scale", "T", "Zr_hat"],
        &median_rows,
    )?;
    summary.push_trace("sweep_median.csv");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// logreg

fn run_logreg(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let dataset = cfg.get_path("dataset");
    let n = cfg.usize_or("n", 100)?;
    let d = cfg.usize_or("d", 30)?;
    let feature_scale = cfg.f64_or("feature_scale", 1.0)?;
    let total_iters = cfg.u64_or("total_iters", 10_000)?;
    let s = cfg.usize_or("s", 2)?;
    let z_tgt = cfg.f64_or("z_tgt", 0.5)?;
    let epsilon = cfg.f64_or("epsilon", 1e-4)?;
    let base_lr = cfg.f64_or("base_lr", 1e-3)?;
    let threshold_lr = cfg.f64_or("threshold_lr", 1.0)?;
    let t_init_samples = cfg.usize_or("t_init_samples", 1000)?;
    let eval_every = cfg.u64_or("eval_every", 1000)?;
    let eval_samples = cfg.usize_or("eval_samples", 20_000)?;
    let mf_iters = cfg.u64_or("mf_iters", 3000)?;
    let mf_s = cfg.usize_or("mf_s", 8)?;
    let mf_lr = cfg.f64_or("mf_lr", 1e-3)?;
    cfg.ensure_consumed()?;

    let target = match &dataset {
        Some(path) => LogisticRegressionTarget::from_table(&load_numeric_table(path)?)?,
        None => LogisticRegressionTarget::synthetic(n, d, feature_scale, derive_seed(ctx.seed, 99)),
    };
    let dim = target.dim();
    let mut summary = RunSummary::new("logreg", ctx.seed, cfg.echo());

    let mf_cfg = MfConfig { iters: mf_iters, s: mf_s, lr: mf_lr };
    let (mf_q, mf_trace) = fit_meanfield(
        &target,
        &[],
        MeanFieldNormal::standard(dim),
        &mf_cfg,
        RngStreams::new(derive_seed(ctx.seed, 0)),
        0,
    )?;
    write_mf_trace(&ctx.out_dir.join("mf_trace.csv"), &mf_trace)?;
    summary.push_trace("mf_trace.csv");
    let mf_elbo = mc_plain_elbo(
        &target,
        &[],
        &mf_q,
        &mut RngStreams::new(derive_seed(ctx.seed, 3)).keyed(0, 0),
        eval_samples,
    )?;

    let train_cfg = TrainConfig {
        total_iters,
        s,
        z_tgt,
        epsilon,
        base_lr,
        eval_every: Some(eval_every),
        eval_samples,
        threshold_lr,
        t_init_samples,
        ..TrainConfig::default()
    };
    let init = MeanFieldNormal::standard(dim);
    let methods: Vec<(&str, bool)> = vec![("rvrs", true), ("vrs", false)];
    let fits = parallel_map(methods, ctx.workers, |(name, pathwise)| -> Result<_> {
        let streams = RngStreams::new(derive_seed(ctx.seed, if pathwise { 1 } else { 2 }));
        let fit = if pathwise {
            fit_rvrs(&target, &[], init.clone(), &train_cfg, streams, 0)?
        } else {
            fit_vrs(&target, &[], init.clone(), &train_cfg, streams, 0)?
        };
        let (elbo, zr_hat) = final_eval_of(&fit)?;
        Ok((name, FitOutcome { fit, elbo, zr_hat }))
    })?;

    let mut rows = vec![vec![
        "mf".to_string(),
        fmt_f64(mf_elbo),
        fmt_f64(f64::INFINITY),
        fmt_f64(1.0),
        fmt_f64(gmean_scale(&mf_q)),
    ]];
    summary.push_metric("elbo_mf_mc", mf_elbo);
    summary.push_metric("gmean_scale_mf", gmean_scale(&mf_q));
    for (name, out) in &fits {
        let trace_name = format!("{name}_trace.csv");
        write_trace(&ctx.out_dir.join(&trace_name), &out.fit.trace)?;
        summary.push_trace(&trace_name);
        let evals_name = format!("{name}_evals.csv");
        let eval_rows: Vec<Vec<String>> = out
            .fit
            .evals
            .iter()
            .map(|e| vec![e.iter.to_string(), fmt_f64(e.elbo), fmt_f64(e.zr_hat)])
            .collect();
        write_csv(&ctx.out_dir.join(&evals_name), &["iter", "elbo", "Zr_hat"], &eval_rows)?;
        summary.push_trace(&evals_name);
        write_meanfield_params(
            &ctx.out_dir.join(format!("params_{name}.kv")),
            &out.fit.proposal,
            out.fit.acceptance.threshold,
            out.fit.acceptance.epsilon,
        )?;
        rows.push(vec![
            name.to_string(),
            fmt_f64(out.elbo),
            fmt_f64(out.fit.acceptance.threshold),
            fmt_f64(out.zr_hat),
            fmt_f64(gmean_scale(&out.fit.proposal)),
        ]);
        summary.push_metric(&format!("elbo_{name}"), out.elbo);
        summary.push_metric(&format!("t_{name}"), out.fit.acceptance.threshold);
        summary.push_metric(&format!("zr_hat_{name}"), out.zr_hat);
        summary.push_metric(&format!("gmean_scale_{name}"), gmean_scale(&out.fit.proposal));
    }
    write_csv(
        &ctx.out_dir.join("results.csv"),
        &["method", "elbo", "T", "Zr_hat", "gmean_scale"],
        &rows,
    )?;
    summary.push_trace("results.csv");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// semi

fn run_semi(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let n = cfg.usize_or("n", 128)?;
    let d_x = cfg.usize_or("d_x", 2)?;
    let nu = cfg.f64_or("nu", 4.0)?;
    let sigma = cfg.f64_or("sigma", 1.0)?;
    let outlier_sd = cfg.f64_or("outlier_sd", 3.0)?;
    let z_tgt = cfg.f64_or("z_tgt", 0.5)?;
    let s = cfg.usize_or("s", 2)?;
    let default_s_prime = (2.0 * s as f64 / z_tgt).ceil() as usize;
    let s_prime = cfg.usize_or("s_prime", default_s_prime)?;
    let batch = cfg.usize_or("batch", 32)?;
    let total_steps = cfg.u64_or("total_steps", 4000)?;
    let base_lr = cfg.f64_or("base_lr", 1e-2)?;
    let threshold_lr = cfg.f64_or("threshold_lr", 1.0)?;
    let epsilon = cfg.f64_or("epsilon", 1e-4)?;
    let t_init_samples = cfg.usize_or("t_init_samples", 64)?;
    let m1 = cfg.usize_or("m1", 200)?;
    let m2 = cfg.usize_or("m2", 512)?;
    let oracle_iters = cfg.u64_or("oracle_iters", 4000)?;
    let oracle_s = cfg.usize_or("oracle_s", 8)?;
    let oracle_lr = cfg.f64_or("oracle_lr", 1e-3)?;
    let eval_samples = cfg.usize_or("eval_samples", 20_000)?;
    cfg.ensure_consumed()?;

    let model =
        HierStudentTModel::synthetic(n, d_x, nu, sigma, outlier_sd, derive_seed(ctx.seed, 99));
    let mut summary = RunSummary::new("semi", ctx.seed, cfg.echo());

    // Oracle: the same mean-field family on the global block, with every
    // local latent integrated out analytically.
    let integrated = model.integrated();
    let mf_cfg = MfConfig { iters: oracle_iters, s: oracle_s, lr: oracle_lr };
    let (oracle_q, oracle_trace) = fit_meanfield(
        &integrated,
        &[],
        MeanFieldNormal::standard(integrated.dim()),
        &mf_cfg,
        RngStreams::new(derive_seed(ctx.seed, 0)),
        0,
    )?;
    write_mf_trace(&ctx.out_dir.join("oracle_trace.csv"), &oracle_trace)?;
    summary.push_trace("oracle_trace.csv");
    let oracle_elbo = mc_plain_elbo(
        &integrated,
        &[],
        &oracle_q,
        &mut RngStreams::new(derive_seed(ctx.seed, 4)).keyed(0, 0),
        eval_samples,
    )? / n as f64;

    let semi_cfg = |sampler: LocalSampler| SemiTrainConfig {
        total_steps,
        s,
        batch,
        sampler,
        z_tgt,
        epsilon,
        base_lr,
        threshold_lr,
        learn_theta: false,
        t_init_samples,
    };
    let eval_streams = RngStreams::new(derive_seed(ctx.seed, 3));
    let variants: Vec<(&str, LocalSampler, u64)> = vec![
        ("biased", LocalSampler::Truncated { s_prime }, 1),
        ("unbiased", LocalSampler::Exact { max_proposals: None }, 2),
    ];
    let fits = parallel_map(variants, ctx.workers, |(name, sampler, k)| -> Result<_> {
        let fit = fit_semi(
            &model,
            &[],
            SemiProposal::standard(&model),
            &semi_cfg(sampler),
            RngStreams::new(derive_seed(ctx.seed, k)),
        )?;
        // Paired evaluation: both variants score on the same draws.
        let eval = evaluate_semi(&model, &[], &fit.proposal, epsilon, eval_streams, m1, m2)?;
        Ok((name, fit, eval))
    })?;

    let mut rows = vec![vec![
        "oracle".to_string(),
        fmt_f64(oracle_elbo),
        fmt_f64(1.0),
    ]];
    summary.push_metric("elbo_per_datapoint_oracle", oracle_elbo);
    for (name, fit, eval) in &fits {
        let trace_name = format!("semi_{name}_trace.csv");
        let trace_rows: Vec<Vec<String>> = fit
            .trace
            .iter()
            .map(|r| {
                vec![
                    r.step.to_string(),
                    fmt_f64(r.elbo_proxy),
                    fmt_f64(r.mask_rate),
                    fmt_f64(r.lr),
                ]
            })
            .collect();
        write_csv(
            &ctx.out_dir.join(&trace_name),
            &["step", "elbo_proxy", "mask_rate", "lr"],
            &trace_rows,
        )?;
        summary.push_trace(&trace_name);
        rows.push(vec![
            name.to_string(),
            fmt_f64(eval.elbo_per_datapoint),
            fmt_f64(fit.mask_rate),
        ]);
        summary.push_metric(&format!("elbo_per_datapoint_{name}"), eval.elbo_per_datapoint);
        summary.push_metric(&format!("mask_rate_{name}"), fit.mask_rate);
    }
    write_csv(
        &ctx.out_dir.join("results.csv"),
        &["method", "elbo_per_datapoint", "mask_rate"],
        &rows,
    )?;
    summary.push_trace("results.csv");

    let biased = fits.iter().find(|(n, _, _)| *n == "biased");
    let unbiased = fits.iter().find(|(n, _, _)| *n == "unbiased");
    if let (Some((_, _, eb)), Some((_, _, eu))) = (biased, unbiased) {
        summary.push_metric("gap_oracle_minus_biased", oracle_elbo - eb.elbo_per_datapoint);
        summary
            .push_metric("gap_biased_vs_unbiased", (eb.elbo_per_datapoint - eu.elbo_per_datapoint).abs());
    }
    Ok(summary)
}

// ---------------------------------------------------------------------------
// bound-check

fn run_bound_check(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let instances = cfg.usize_or("instances", 20)?;
    let t_grid = cfg.f64_list_or(
        "t_grid",
        &[-8.0, -7.0, -6.0, -5.0, -4.0, -3.0, -2.0, -1.0, 0.0],
    )?;
    let grid_nodes = cfg.usize_or("grid_nodes", 20_001)?;
    cfg.ensure_consumed()?;

    let mut summary = RunSummary::new("bound-check", ctx.seed, cfg.echo());
    let streams = RngStreams::new(derive_seed(ctx.seed, 0));
    let jobs: Vec<usize> = (0..instances).collect();
    let grid = QuadratureGrid::trapezoid(&[-24.0], &[24.0], grid_nodes)?;
    let reports = parallel_map(jobs, ctx.workers, |i| -> Result<_> {
        let mut rng = streams.keyed(0, i as u64);
        // Random 1-D instances with proposal tails heavy enough that the
        // overlap moment stays finite (it diverges once the proposal scale
        // drops below the target scale over sqrt(2)).
        let unit = |rng: &mut dyn rand::RngCore| rand::Rng::gen::<f64>(rng);
        let mean_p = 2.0 * unit(&mut rng) - 1.0;
        let sd_p = 0.5 + 1.5 * unit(&mut rng);
        let mean_q = mean_p + 0.5 * (2.0 * unit(&mut rng) - 1.0);
        let sd_q = sd_p * (0.85 + 0.75 * unit(&mut rng));
        let log_zp = 2.0 * unit(&mut rng) - 1.0;
        let target = AnalyticGaussianTarget::scalar(log_zp, mean_p, sd_p);
        let proposal = MeanFieldNormal::new(vec![mean_q], vec![sd_q.ln()])?;
        let reports = check_prop2(&target, &target.theta0(), &proposal, &t_grid, &grid)?;
        Ok((i, reports))
    })?;

    let mut rows = Vec::new();
    let mut n_valid = 0u64;
    let mut n_holds = 0u64;
    for (i, instance) in &reports {
        for r in instance {
            n_valid += u64::from(r.valid);
            n_holds += u64::from(r.holds);
            rows.push(vec![
                i.to_string(),
                fmt_f64(r.threshold),
                fmt_f64(r.xi),
                fmt_f64(r.delta),
                fmt_f64(r.bound),
                (r.valid as u8).to_string(),
                (r.holds as u8).to_string(),
            ]);
        }
    }
    write_csv(
        &ctx.out_dir.join("bound.csv"),
        &["instance", "T", "xi", "delta", "bound", "valid", "holds"],
        &rows,
    )?;
    summary.push_trace("bound.csv");

    let total = rows.len() as f64;
    let stats = vec![vec![
        fmt_f64(total),
        fmt_f64(n_valid as f64),
        fmt_f64(n_holds as f64),
        fmt_f64(n_holds as f64 / total),
    ]];
    write_csv(
        &ctx.out_dir.join("bound_summary.csv"),
        &["rows", "n_valid", "n_holds", "holds_fraction"],
        &stats,
    )?;
    summary.push_trace("bound_summary.csv");
    summary.push_metric("rows", total);
    summary.push_metric("n_valid", n_valid as f64);
    summary.push_metric("n_holds", n_holds as f64);
    summary.push_metric("holds_fraction", n_holds as f64 / total);
    Ok(summary)
}

// ---------------------------------------------------------------------------
// eval

fn run_eval(cfg: &mut Config, ctx: &RunContext) -> Result<RunSummary> {
    let params_path = cfg
        .get_path("params")
        .ok_or_else(|| Error::Config("eval requires `params = <file>`".into()))?;
    let target_kind = cfg.str_or("target", "funnel");
    let n = cfg.usize_or("n", 100)?;
    let d = cfg.usize_or("d", 30)?;
    let feature_scale = cfg.f64_or("feature_scale", 1.0)?;
    let target_mean = cfg.f64_or("target_mean", 0.0)?;
    let target_sd = cfg.f64_or("target_sd", 1.0)?;
    let samples = cfg.usize_or("samples", 20_000)?;
    let max_proposals = cfg.get_u64("max_proposals")?;
    cfg.ensure_consumed()?;

    let target: Box<dyn Target> = match target_kind.as_str() {
        "funnel" => Box::new(FunnelTarget::new()),
        "logreg-synthetic" => Box::new(LogisticRegressionTarget::synthetic(
            n,
            d,
            feature_scale,
            derive_seed(ctx.seed, 99),
        )),
        "gaussian" => Box::new(AnalyticGaussianTarget::scalar(0.0, target_mean, target_sd)),
        other => {
            return Err(Error::Config(format!(
                "unknown target {other:?}; expected funnel, logreg-synthetic, or gaussian"
            )))
        }
    };
    let (q, threshold, epsilon) = read_meanfield_params(&params_path)?;
    if q.dim() != target.dim() {
        return Err(Error::Dim { expected: target.dim(), got: q.dim() });
    }
    let acceptance = AcceptanceConfig::new(threshold, epsilon)?;
    let point = evaluate(
        target.as_ref(),
        &[],
        &q,
        &acceptance,
        &mut RngStreams::new(derive_seed(ctx.seed, 0)).keyed(0, 0),
        samples,
        max_proposals,
    )?;

    let mut summary = RunSummary::new("eval", ctx.seed, cfg.echo());
    write_csv(
        &ctx.out_dir.join("results.csv"),
        &["elbo", "Zr_hat", "samples"],
        &[vec![fmt_f64(point.elbo), fmt_f64(point.zr_hat), samples.to_string()]],
    )?;
    summary.push_trace("results.csv");
    summary.push_metric("elbo", point.elbo);
    summary.push_metric("zr_hat", point.zr_hat);
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(Experiment::parse(e.name()).unwrap(), e);
        }
        assert!(Experiment::parse("nope").is_err());
    }

    #[test]
    fn parallel_map_is_order_preserving_and_worker_invariant() {
        let items: Vec<u64> = (0..23).collect();
        let sequential = parallel_map(items.clone(), 1, |x| Ok(x * x)).unwrap();
        let parallel = parallel_map(items, 4, |x| Ok(x * x)).unwrap();
        assert_eq!(sequential, parallel);
        assert_eq!(sequential[5], 25);
    }

    #[test]
    fn parallel_map_propagates_the_lowest_index_error() {
        let items: Vec<u64> = (0..8).collect();
        let err = parallel_map(items, 3, |x| -> Result<u64> {
            if x >= 2 {
                Err(Error::Config(format!("bad item {x}")))
            } else {
                Ok(x)
            }
        })
        .unwrap_err();
        assert_eq!(err.to_string(), "config error: bad item 2");
    }

    #[test]
    fn context_resolution_prefers_flags_over_config_keys() {
        let mut cfg = Config::parse("seed = 11\noutput_dir = from_file\n").unwrap();
        let ctx = resolve_context(
            &mut cfg,
            Experiment::Funnel,
            Some(5),
            Some(PathBuf::from("from_flag")),
            0,
        )
        .unwrap();
        assert_eq!(ctx.seed, 5);
        assert_eq!(ctx.out_dir, PathBuf::from("from_flag"));
        assert_eq!(ctx.workers, 1);
        cfg.ensure_consumed().unwrap();

        let mut cfg = Config::parse("seed = 11\n").unwrap();
        let ctx = resolve_context(&mut cfg, Experiment::Logreg, None, None, 2).unwrap();
        assert_eq!(ctx.seed, 11);
        assert_eq!(ctx.out_dir, PathBuf::from("runs").join("logreg"));
        assert_eq!(ctx.workers, 2);
    }

    #[test]
    fn experiment_key_must_match_the_requested_experiment() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext { seed: 0, out_dir: dir.path().join("out"), workers: 1 };
        let cfg = Config::parse("experiment = funnel\n").unwrap();
        let err = run(Experiment::Gradvar, cfg, &ctx).unwrap_err();
        assert!(err.to_string().contains("funnel"), "{err}");
    }

    #[test]
    fn bound_check_driver_writes_consistent_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext { seed: 3, out_dir: dir.path().to_path_buf(), workers: 2 };
        let cfg = Config::parse(
            "instances = 3\nt_grid = -6, -3, 0\ngrid_nodes = 4001\n",
        )
        .unwrap();
        let summary = run(Experiment::BoundCheck, cfg, &ctx).unwrap();
        assert_eq!(summary.metrics.iter().find(|(k, _)| k == "rows").unwrap().1, 9.0);
        let bound = std::fs::read_to_string(dir.path().join("bound.csv")).unwrap();
        assert_eq!(bound.lines().count(), 10);
        assert!(dir.path().join("summary.json").exists());
        assert!(dir.path().join("metrics.csv").exists());

        // Same seed, more workers: identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        let ctx2 = RunContext { seed: 3, out_dir: dir2.path().to_path_buf(), workers: 4 };
        let cfg2 = Config::parse(
            "instances = 3\nt_grid = -6, -3, 0\ngrid_nodes = 4001\n",
        )
        .unwrap();
        run(Experiment::BoundCheck, cfg2, &ctx2).unwrap();
        assert_eq!(
            std::fs::read_to_string(dir.path().join("bound.csv")).unwrap(),
            std::fs::read_to_string(dir2.path().join("bound.csv")).unwrap()
        );
    }

    #[test]
    fn funnel_then_eval_round_trips_saved_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext { seed: 1, out_dir: dir.path().to_path_buf(), workers: 1 };
        let cfg = Config::parse(
            "z_tgt_list = 0.5\ntotal_iters = 200\neval_every = 200\neval_samples = 500\n\
             mf_iters = 100\ngrid_nodes = 11\nt_init_samples = 50\n",
        )
        .unwrap();
        let summary = run(Experiment::Funnel, cfg, &ctx).unwrap();
        assert!(summary.metrics.iter().any(|(k, _)| k == "elbo_z0.5"));

        let eval_dir = tempfile::tempdir().unwrap();
        let eval_ctx = RunContext { seed: 1, out_dir: eval_dir.path().to_path_buf(), workers: 1 };
        let eval_cfg = Config::parse(&format!(
            "target = funnel\nparams = {}\nsamples = 400\n",
            dir.path().join("params_z0.5.kv").display()
        ))
        .unwrap();
        let eval_summary = run(Experiment::Eval, eval_cfg, &eval_ctx).unwrap();
        assert!(eval_summary.metrics.iter().any(|(k, v)| k == "elbo" && v.is_finite()));
    }
}
