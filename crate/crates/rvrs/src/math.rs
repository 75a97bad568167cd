//! Shared scalar and small-vector numerics.
//!
//! Everything here is deliberately boring: numerically stable logistic
//! functions, Normal log-densities, log-sum-exp reductions, streaming
//! moments, and dense lower-triangular linear algebra sized for the small
//! dimensions this crate works in. The estimators and oracles both build on
//! these primitives so that agreement between them is never an accident of
//! two different `exp` pipelines.

use crate::error::{check_len, Result};

/// Natural log of `2 * pi`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Logistic function `1 / (1 + exp(-u))`, stable for large `|u|`.
///
/// For `u >= 0` the direct form is used; for `u < 0` the algebraically
/// equivalent `exp(u) / (1 + exp(u))` avoids overflow in `exp(-u)`.
pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(x))`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(sigmoid(u))`, stable for very negative `u` where `sigmoid(u)`
/// underflows to zero.
pub fn log_sigmoid(u: f64) -> f64 {
    -softplus(-u)
}

/// Log density of `Normal(mean, sd^2)` at `x`.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let t = (x - mean) / sd;
    -0.5 * LN_2PI - sd.ln() - 0.5 * t * t
}

/// Log density of a standard multivariate Normal at `z`.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    let sq: f64 = z.iter().map(|&v| v * v).sum();
    -0.5 * (z.len() as f64) * LN_2PI - 0.5 * sq
}

/// Gradient of [`std_normal_logpdf`] with respect to `z`.
pub fn std_normal_grad(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| -v).collect()
}

/// `log(sum_i exp(x_i))`, stable; returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// `log((1/n) sum_i exp(x_i))`, stable.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

/// Arithmetic mean; zero for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator `n - 1`).
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    xs.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / (n as f64 - 1.0)
}

/// Streaming mean and variance accumulator.
///
/// Uses Welford's update so very long accumulations (millions of gradient
/// batches) stay accurate. Pushing values in a fixed order yields bitwise
/// reproducible results.
#[derive(Debug, Clone, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    /// Empty accumulator.
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one observation.
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Number of observations seen.
    pub fn count(&self) -> u64 {
        self.n
    }

    /// Mean of the observations; zero before the first push.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero until two observations arrive.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }
}

/// Per-coordinate [`RunningMoments`] over fixed-length vectors.
#[derive(Debug, Clone)]
pub struct RunningMomentsVec {
    coords: Vec<RunningMoments>,
}

impl RunningMomentsVec {
    /// Accumulator for vectors of length `dim`.
    pub fn new(dim: usize) -> Self {
        Self { coords: vec![RunningMoments::new(); dim] }
    }

    /// Adds one vector observation.
    pub fn push(&mut self, xs: &[f64]) -> Result<()> {
        check_len(self.coords.len(), xs.len())?;
        for (acc, &x) in self.coords.iter_mut().zip(xs) {
            acc.push(x);
        }
        Ok(())
    }

    /// Number of vector observations seen.
    pub fn count(&self) -> u64 {
        self.coords.first().map_or(0, RunningMoments::count)
    }

    /// Per-coordinate means.
    pub fn means(&self) -> Vec<f64> {
        self.coords.iter().map(RunningMoments::mean).collect()
    }

    /// Per-coordinate unbiased variances.
    pub fn variances(&self) -> Vec<f64> {
        self.coords.iter().map(RunningMoments::variance).collect()
    }
}

/// Median of a slice; `NaN` for an empty slice. Does not require the input
/// to be sorted.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median of non-NaN values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Geometric mean of strictly positive values.
pub fn geometric_mean(xs: &[f64]) -> f64 {
    mean(&xs.iter().map(|&x| x.ln()).collect::<Vec<_>>()).exp()
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `y = L x` for a dense row-major `d x d` matrix of which only the lower
/// triangle (diagonal included) is read.
pub fn tri_matvec(l: &[f64], d: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(l.len(), d * d);
    debug_assert_eq!(x.len(), d);
    let mut y = vec![0.0; d];
    for i in 0..d {
        let row = &l[i * d..i * d + i + 1];
        y[i] = dot(row, &x[..i + 1]);
    }
    y
}

/// Solves `L y = b` by forward substitution for a dense row-major lower
/// triangle with nonzero diagonal.
pub fn tri_solve_lower(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(l.len(), d * d);
    debug_assert_eq!(b.len(), d);
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut acc = b[i];
        for j in 0..i {
            acc -= l[i * d + j] * y[j];
        }
        y[i] = acc / l[i * d + i];
    }
    y
}

/// Solves `L^T y = b` by back substitution for a dense row-major lower
/// triangle with nonzero diagonal.
pub fn tri_solve_lower_t(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(l.len(), d * d);
    debug_assert_eq!(b.len(), d);
    let mut y = vec![0.0; d];
    for i in (0..d).rev() {
        let mut acc = b[i];
        for j in i + 1..d {
            acc -= l[j * d + i] * y[j];
        }
        y[i] = acc / l[i * d + i];
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn sigmoid_matches_definition_and_saturates_cleanly() {
        assert_relative_eq!(sigmoid(0.0), 0.5);
        assert_relative_eq!(sigmoid(-1.0), 1.0 / (1.0 + 1f64.exp()), epsilon = 1e-15);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert!(sigmoid(800.0).is_finite());
        assert!(sigmoid(-800.0).is_finite());
    }

    #[test]
    fn log_sigmoid_is_stable_where_sigmoid_underflows() {
        assert_relative_eq!(log_sigmoid(-700.0), -700.0, epsilon = 1e-12);
        assert_relative_eq!(log_sigmoid(3.0), sigmoid(3.0).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(log_sigmoid(40.0), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn softplus_agrees_with_naive_form_in_safe_range() {
        for &x in &[-20.0, -3.0, 0.0, 1.5, 20.0] {
            assert_relative_eq!(softplus(x), (1f64 + x.exp()).ln(), epsilon = 1e-12);
        }
        assert_relative_eq!(softplus(900.0), 900.0);
    }

    #[test]
    fn normal_logpdf_matches_standard_normal_at_zero() {
        assert_relative_eq!(normal_logpdf(0.0, 0.0, 1.0), -0.5 * LN_2PI, epsilon = 1e-15);
        assert_relative_eq!(
            std_normal_logpdf(&[0.3, -0.7]),
            normal_logpdf(0.3, 0.0, 1.0) + normal_logpdf(-0.7, 0.0, 1.0),
            epsilon = 1e-14
        );
    }

    #[test]
    fn log_mean_exp_handles_large_offsets() {
        let xs = [1000.0, 1000.0 + (2f64).ln()];
        // mean of exp is 1.5 * exp(1000)
        assert_relative_eq!(log_mean_exp(&xs), 1000.0 + 1.5f64.ln(), epsilon = 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn running_moments_match_two_pass_formulas() {
        let xs = [0.3, -1.2, 4.5, 0.0, 2.2, -0.7];
        let mut acc = RunningMoments::new();
        for &x in &xs {
            acc.push(x);
        }
        assert_relative_eq!(acc.mean(), mean(&xs), epsilon = 1e-14);
        assert_relative_eq!(acc.variance(), sample_variance(&xs), epsilon = 1e-14);
        assert_eq!(acc.count(), xs.len() as u64);
    }

    #[test]
    fn running_moments_vec_tracks_each_coordinate() {
        let mut acc = RunningMomentsVec::new(2);
        acc.push(&[1.0, 10.0]).unwrap();
        acc.push(&[3.0, 30.0]).unwrap();
        assert_eq!(acc.means(), vec![2.0, 20.0]);
        assert_relative_eq!(acc.variances()[1], 200.0, epsilon = 1e-12);
        assert!(acc.push(&[1.0]).is_err());
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn triangular_ops_invert_each_other() {
        // L = [[2, 0], [1, 3]] row-major with garbage in the upper slot to
        // prove the upper triangle is ignored.
        let l = [2.0, 99.0, 1.0, 3.0];
        let x = [0.7, -1.1];
        let y = tri_matvec(&l, 2, &x);
        assert_relative_eq!(y[0], 1.4, epsilon = 1e-15);
        assert_relative_eq!(y[1], 0.7 - 3.3, epsilon = 1e-15);
        let back = tri_solve_lower(&l, 2, &y);
        assert_relative_eq!(back[0], x[0], epsilon = 1e-14);
        assert_relative_eq!(back[1], x[1], epsilon = 1e-14);

        // L^T solve: check against explicit 2x2 inverse-transpose product.
        let b = [1.0, 2.0];
        let yt = tri_solve_lower_t(&l, 2, &b);
        assert_relative_eq!(2.0 * yt[0] + 1.0 * yt[1], b[0], epsilon = 1e-14);
        assert_relative_eq!(3.0 * yt[1], b[1], epsilon = 1e-14);
    }

    #[test]
    fn geometric_mean_of_constant_is_constant() {
        assert_relative_eq!(geometric_mean(&[0.5, 0.5, 0.5]), 0.5, epsilon = 1e-14);
    }
}
