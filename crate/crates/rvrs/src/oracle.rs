//! Independent ground-truth machinery.
//!
//! Everything the Monte Carlo estimators claim is checked against a second
//! route that shares no algebra with them: deterministic trapezoid
//! quadrature for normalizers, bounds, and moments; central finite
//! differences for gradients; and classical distribution tests for sampler
//! output. Quadrature is limited to one and two dimensions on purpose,
//! which is exactly where grids are trustworthy.
//!
//! ```
//! use rvrs::oracle::{quad_zr, QuadratureGrid};
//! use rvrs::proposal::MeanFieldNormal;
//! use rvrs::sampler::AcceptanceConfig;
//! use rvrs::target::AnalyticGaussianTarget;
//!
//! // Proposal equals the posterior, so Z_r = sigmoid(log_zp + T) exactly.
//! let target = AnalyticGaussianTarget::standard(1, -1.0);
//! let q = MeanFieldNormal::standard(1);
//! let grid = QuadratureGrid::for_proposal(&q, 12.0, 2001).unwrap();
//! let cfg = AcceptanceConfig::new(0.0, 0.0).unwrap();
//! let zr = quad_zr(&target, &[-1.0], &q, &cfg, &grid).unwrap();
//! assert!((zr - 0.2689414213699951).abs() < 1e-10);
//! ```

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::proposal::Proposal;
use crate::sampler::AcceptanceConfig;
use crate::target::Target;

/// Grid half-width in proposal standard deviations that comfortably covers
/// Gaussian tails at double precision.
pub const DEFAULT_HALF_WIDTH_SDS: f64 = 12.0;

/// Default node count for one-dimensional grids.
pub const DEFAULT_NODES_1D: usize = 2001;

/// Default node count per axis for two-dimensional grids.
pub const DEFAULT_NODES_2D: usize = 1201;

/// Relative integrand mass allowed at the grid boundary before a tail
/// moment is declared divergent.
pub const XI_EDGE_TOLERANCE: f64 = 1e-12;

/// Product trapezoid grid over an axis-aligned box, one or two dimensional.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    axes: Vec<Axis>,
}

#[derive(Debug, Clone)]
struct Axis {
    nodes: Vec<f64>,
    step: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, k: usize) -> Result<Self> {
        if k < 3 {
            return Err(Error::Config(format!("need at least 3 nodes per axis, got {k}")));
        }
        if !(lo < hi) {
            return Err(Error::Config(format!("invalid axis range [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (k - 1) as f64;
        Ok(Self { nodes: (0..k).map(|i| lo + step * i as f64).collect(), step })
    }

    fn weight(&self, i: usize) -> f64 {
        let end = i == 0 || i == self.nodes.len() - 1;
        if end {
            0.5 * self.step
        } else {
            self.step
        }
    }
}

impl QuadratureGrid {
    /// Grid over the box `[lo[i], hi[i]]` with `nodes_per_axis` nodes per
    /// axis. Only one- and two-dimensional boxes are supported.
    pub fn trapezoid(lo: &[f64], hi: &[f64], nodes_per_axis: usize) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dim { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() || lo.len() > 2 {
            return Err(Error::Dim { expected: 2, got: lo.len() });
        }
        let axes = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| Axis::new(l, h, nodes_per_axis))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { axes })
    }

    /// Grid centered on the proposal's marginals, extending `half_sds`
    /// standard deviations each way.
    pub fn for_proposal<P: Proposal + ?Sized>(
        proposal: &P,
        half_sds: f64,
        nodes_per_axis: usize,
    ) -> Result<Self> {
        let d = proposal.dim();
        if d > 2 {
            return Err(Error::Dim { expected: 2, got: d });
        }
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for i in 0..d {
            let (m, sd) = proposal.marginal_mean_sd(i);
            lo.push(m - half_sds * sd);
            hi.push(m + half_sds * sd);
        }
        Self::trapezoid(&lo, &hi, nodes_per_axis)
    }

    /// Dimension of the grid.
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Total number of product nodes.
    pub fn point_count(&self) -> usize {
        self.axes.iter().map(|a| a.nodes.len()).product()
    }

    /// Visits every product node with its trapezoid weight and an edge flag
    /// (true when the node lies on the boundary of the box).
    pub fn for_each(
        &self,
        mut f: impl FnMut(&[f64], f64, bool) -> Result<()>,
    ) -> Result<()> {
        match self.axes.len() {
            1 => {
                let ax = &self.axes[0];
                let last = ax.nodes.len() - 1;
                for (i, &x) in ax.nodes.iter().enumerate() {
                    f(&[x], ax.weight(i), i == 0 || i == last)?;
                }
                Ok(())
            }
            2 => {
                let (a0, a1) = (&self.axes[0], &self.axes[1]);
                let (l0, l1) = (a0.nodes.len() - 1, a1.nodes.len() - 1);
                for (i, &x) in a0.nodes.iter().enumerate() {
                    let wi = a0.weight(i);
                    let ei = i == 0 || i == l0;
                    for (j, &y) in a1.nodes.iter().enumerate() {
                        let edge = ei || j == 0 || j == l1;
                        f(&[x, y], wi * a1.weight(j), edge)?;
                    }
                }
                Ok(())
            }
            d => Err(Error::Dim { expected: 2, got: d }),
        }
    }

    /// Integrates `f` over the box.
    pub fn integrate(&self, mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut acc = 0.0;
        self.for_each(|z, w, _| {
            acc += w * f(z)?;
            Ok(())
        })?;
        Ok(acc)
    }

    /// Integrates `exp(log_f)` in max-shifted form and returns the log of
    /// the integral, immune to underflow of the integrand.
    pub fn integrate_log(&self, mut log_f: impl FnMut(&[f64]) -> Result<f64>) -> Result<f64> {
        let mut vals = Vec::with_capacity(self.point_count());
        let mut weights = Vec::with_capacity(self.point_count());
        let mut m = f64::NEG_INFINITY;
        self.for_each(|z, w, _| {
            let v = log_f(z)?;
            m = m.max(v);
            vals.push(v);
            weights.push(w);
            Ok(())
        })?;
        if !m.is_finite() {
            return Ok(f64::NEG_INFINITY);
        }
        let s: f64 = vals.iter().zip(&weights).map(|(&v, &w)| w * (v - m).exp()).sum();
        Ok(m + s.ln())
    }
}

/// Quadrature value of the acceptance normalizer `Z_r = integral of q a`.
pub fn quad_zr<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    grid: &QuadratureGrid,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    grid.integrate(|z| {
        let lq = proposal.log_density(z);
        let acc = cfg.acceptance_parts(target.log_joint(theta, z)? - lq);
        Ok(lq.exp() * acc.a)
    })
}

/// Quadrature value of `log Z_p = log integral of exp(log_joint)`.
pub fn quad_log_zp<T: Target + ?Sized>(
    target: &T,
    theta: &[f64],
    grid: &QuadratureGrid,
) -> Result<f64> {
    grid.integrate_log(|z| target.log_joint(theta, z))
}

/// Quadrature value of the evidence lower bound of the accepted-sample law:
/// `E_r[log p - log q - log a] + log Z_r`.
pub fn quad_elbo<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    grid: &QuadratureGrid,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    // Normalize r = q a / Z_r in log space so deep thresholds cannot
    // underflow the weights.
    let log_zr = grid.integrate_log(|z| {
        let lq = proposal.log_density(z);
        let acc = cfg.acceptance_parts(target.log_joint(theta, z)? - lq);
        Ok(lq + acc.log_a)
    })?;
    let mut expectation = 0.0;
    grid.for_each(|z, w, _| {
        let lq = proposal.log_density(z);
        let lp = target.log_joint(theta, z)?;
        let acc = cfg.acceptance_parts(lp - lq);
        let r = (lq + acc.log_a - log_zr).exp();
        expectation += w * r * (lp - lq - acc.log_a);
        Ok(())
    })?;
    Ok(expectation + log_zr)
}

/// Quadrature expectation `E_r[a]`, the acceptance rate seen from the
/// accepted-sample law rather than the proposal.
pub fn quad_expected_a_under_r<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    grid: &QuadratureGrid,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let log_zr = grid.integrate_log(|z| {
        let lq = proposal.log_density(z);
        let acc = cfg.acceptance_parts(target.log_joint(theta, z)? - lq);
        Ok(lq + acc.log_a)
    })?;
    let mut expectation = 0.0;
    grid.for_each(|z, w, _| {
        let lq = proposal.log_density(z);
        let acc = cfg.acceptance_parts(target.log_joint(theta, z)? - lq);
        expectation += w * (lq + acc.log_a - log_zr).exp() * acc.a;
        Ok(())
    })?;
    Ok(expectation)
}

/// Cumulative distribution of the accepted-sample law on a one-dimensional
/// grid: returns the nodes and the normalized cumulative trapezoid sums of
/// `q a`. Useful for building bin probabilities in distribution tests.
pub fn quad_r_cdf<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    cfg: &AcceptanceConfig,
    grid: &QuadratureGrid,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    if grid.dim() != 1 {
        return Err(Error::Dim { expected: 1, got: grid.dim() });
    }
    let mut nodes = Vec::with_capacity(grid.point_count());
    let mut cum = Vec::with_capacity(grid.point_count());
    let mut acc = 0.0;
    grid.for_each(|z, w, _| {
        let lq = proposal.log_density(z);
        let a = cfg.acceptance_parts(target.log_joint(theta, z)? - lq).a;
        acc += w * lq.exp() * a;
        nodes.push(z[0]);
        cum.push(acc);
        Ok(())
    })?;
    let total = *cum.last().expect("grid has nodes");
    for c in &mut cum {
        *c /= total;
    }
    Ok((nodes, cum))
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        buf[i] = x[i] + h;
        let up = f(&buf)?;
        buf[i] = x[i] - h;
        let dn = f(&buf)?;
        buf[i] = x[i];
        grad.push((up - dn) / (2.0 * h));
    }
    Ok(grad)
}

/// Quadrature value of the proposal-overlap tail moment
/// `xi = (integral of p^2 / q) / Z_p` for an unnormalized target `p`.
///
/// The moment diverges when the proposal's tails are lighter than the
/// squared target's; that shows up as integrand mass at the grid boundary
/// and is reported as [`Error::DivergentXi`] instead of a silently
/// grid-dependent number.
pub fn compute_xi<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    grid: &QuadratureGrid,
) -> Result<f64>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let mut log_vals = Vec::with_capacity(grid.point_count());
    let mut weights = Vec::with_capacity(grid.point_count());
    let mut edge_max = f64::NEG_INFINITY;
    let mut peak = f64::NEG_INFINITY;
    grid.for_each(|z, w, edge| {
        let lv = 2.0 * target.log_joint(theta, z)? - proposal.log_density(z);
        peak = peak.max(lv);
        if edge {
            edge_max = edge_max.max(lv);
        }
        log_vals.push(lv);
        weights.push(w);
        Ok(())
    })?;
    let edge_ratio = (edge_max - peak).exp();
    if !(edge_ratio < XI_EDGE_TOLERANCE) {
        return Err(Error::DivergentXi { edge_ratio });
    }
    let log_integral = {
        let s: f64 =
            log_vals.iter().zip(&weights).map(|(&v, &w)| w * (v - peak).exp()).sum();
        peak + s.ln()
    };
    let log_zp = quad_log_zp(target, theta, grid)?;
    Ok((log_integral - log_zp).exp())
}

/// Closed-form value of [`compute_xi`] for a normalized Gaussian target
/// `Normal(m1, s1^2)` under a Gaussian proposal `Normal(m2, s2^2)`.
///
/// Writing `Normal(z; m1, s1^2)^2 = Normal(z; m1, s1^2 / 2) / (2 sqrt(pi) s1)`,
/// the remaining Gaussian ratio integral is itself Gaussian whenever
/// `2 s2^2 > s1^2` and diverges otherwise.
pub fn closed_form_xi_gaussian(m1: f64, s1: f64, m2: f64, s2: f64) -> Result<f64> {
    let v1 = s1 * s1 / 2.0;
    let v2 = s2 * s2;
    let alpha = 1.0 / v1 - 1.0 / v2;
    if alpha <= 0.0 {
        return Err(Error::DivergentXi { edge_ratio: f64::INFINITY });
    }
    let c = (m1 / v1 - m2 / v2) / alpha;
    let log_val = -(2.0 * std::f64::consts::PI.sqrt() * s1).ln()
        + 0.5 * (v2 / v1).ln()
        + 0.5 * (2.0 * std::f64::consts::PI / alpha).ln()
        + 0.5 * (alpha * c * c - m1 * m1 / v1 + m2 * m2 / v2);
    Ok(log_val.exp())
}

/// Verdict of the sandwich bound `log Z_p - ELBO(T) <= 1.5 e^T xi` at one
/// threshold.
#[derive(Debug, Clone, Copy)]
pub struct BoundReport {
    /// Threshold the bound was evaluated at.
    pub threshold: f64,
    /// Tail moment of the problem instance.
    pub xi: f64,
    /// Actual gap `log Z_p - ELBO(T)` by quadrature.
    pub delta: f64,
    /// Bound value `1.5 e^T xi`.
    pub bound: f64,
    /// Whether the bound's validity condition `T < -ln(2 xi)` holds.
    pub valid: bool,
    /// True when the bound is vacuous or satisfied: `valid` implies
    /// `delta <= bound`.
    pub holds: bool,
}

/// Evaluates the sandwich bound at each threshold with the guard off.
///
/// The tail moment is threshold-independent and computed once; the gap
/// `delta` uses the same grid for the evidence and the bound so that grid
/// bias cancels to first order.
pub fn check_prop2<T, P>(
    target: &T,
    theta: &[f64],
    proposal: &P,
    thresholds: &[f64],
    grid: &QuadratureGrid,
) -> Result<Vec<BoundReport>>
where
    T: Target + ?Sized,
    P: Proposal + ?Sized,
{
    let xi = compute_xi(target, theta, proposal, grid)?;
    let log_zp = quad_log_zp(target, theta, grid)?;
    thresholds
        .iter()
        .map(|&t| {
            let cfg = AcceptanceConfig::new(t, 0.0)?;
            let elbo = quad_elbo(target, theta, proposal, &cfg, grid)?;
            let delta = log_zp - elbo;
            let bound = 1.5 * t.exp() * xi;
            let valid = t < -(2.0 * xi).ln();
            Ok(BoundReport { threshold: t, xi, delta, bound, valid, holds: !valid || delta <= bound })
        })
        .collect()
}

/// Chi-squared goodness-of-fit p-value for observed bin counts against
/// expected counts (same total). Expected counts must be positive;
/// callers are responsible for merging bins that would otherwise be tiny.
pub fn chi2_gof_pvalue(observed: &[u64], expected: &[f64]) -> Result<f64> {
    if observed.len() != expected.len() {
        return Err(Error::Dim { expected: expected.len(), got: observed.len() });
    }
    if observed.len() < 2 {
        return Err(Error::BatchTooSmall { s: observed.len(), min: 2 });
    }
    if expected.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Config("expected bin counts must be positive".into()));
    }
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| {
            let d = o as f64 - e;
            d * d / e
        })
        .sum();
    let df = (observed.len() - 1) as f64;
    let dist = ChiSquared::new(df).expect("df >= 1");
    Ok(1.0 - dist.cdf(stat))
}

/// Two-sample Kolmogorov-Smirnov p-value using the asymptotic distribution
/// with the standard finite-sample correction.
pub fn ks_two_sample_pvalue(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::BatchTooSmall { s: 0, min: 1 });
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(|p, q| p.partial_cmp(q).expect("non-NaN samples"));
    b.sort_by(|p, q| p.partial_cmp(q).expect("non-NaN samples"));
    let (n, m) = (a.len(), b.len());
    let mut d: f64 = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let n_e = (n as f64 * m as f64) / (n + m) as f64;
    let lambda = (n_e.sqrt() + 0.12 + 0.11 / n_e.sqrt()) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        p += if k % 2 == 1 { 2.0 * term } else { -2.0 * term };
    }
    Ok(p.clamp(0.0, 1.0))
}
