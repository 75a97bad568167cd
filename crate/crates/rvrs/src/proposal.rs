//! Reparameterized proposal distributions.
//!
//! A proposal `q(z; phi)` plays two roles at once: it is the distribution the
//! rejection sampler draws from, and it is a differentiable path
//! `z = path(eps; phi)` with `eps` drawn from a fixed base distribution.
//! Pathwise gradient estimators never materialize the Jacobian
//! `d z / d phi`; they hand a cotangent vector in `z`-space to
//! [`Proposal::velocity_vjp`], which contracts it against the path Jacobian
//! analytically.
//!
//! Two families are provided:
//!
//! * [`MeanFieldNormal`]: diagonal Gaussian, `z_i = mu_i + exp(log_scale_i) * eps_i`.
//! * [`FullRankNormal`]: Gaussian with a Cholesky factor, `z = mu + L eps`,
//!   where `L` has positive diagonal `exp(chol_log_diag)` and free
//!   strictly-lower entries.
//!
//! Flattened parameter layout is `[mu | log-scales | off-diagonals]`; the
//! full-rank layout therefore starts with the mean-field layout, and a
//! full-rank proposal with zero off-diagonals behaves identically to the
//! mean-field one.
//!
//! ```
//! use rvrs::proposal::{MeanFieldNormal, Proposal};
//! use rvrs::rng::rng_from_seed;
//!
//! let q = MeanFieldNormal::standard(2);
//! let mut rng = rng_from_seed(0);
//! let (z, eps) = q.sample_reparam(&mut rng);
//! // For the standard proposal the path is the identity on eps.
//! assert_eq!(z, eps.eps);
//! // A cotangent in z-space pulls back to a gradient over [mu | log_scale].
//! let grad = q.velocity_vjp(&z, &eps, &[1.0, 0.0]).unwrap();
//! assert_eq!(grad.len(), q.param_len());
//! ```

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_len, Error, Result};
use crate::math::{normal_logpdf, tri_matvec, tri_solve_lower, tri_solve_lower_t, LN_2PI};

/// Absolute tolerance used to verify that a `(z, eps)` pair lies on the
/// proposal's reparameterization path.
pub const INCONSISTENT_PATH_TOL: f64 = 1e-9;

/// Base noise consumed by one reparameterized draw.
///
/// Kept alongside the sample so gradient contractions can be evaluated later
/// without replaying the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    /// Standard Normal variates, one per dimension, in draw order.
    pub eps: Vec<f64>,
}

/// A reparameterized proposal distribution with a flat parameter vector.
pub trait Proposal {
    /// Dimension of the sample space.
    fn dim(&self) -> usize;

    /// Length of the flattened parameter vector.
    fn param_len(&self) -> usize;

    /// Current parameters, flattened.
    fn params_flat(&self) -> Vec<f64>;

    /// Replaces the parameters from a flattened vector of length
    /// [`Proposal::param_len`].
    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()>;

    /// Draws `z = path(eps)` with fresh base noise, consuming exactly
    /// [`Proposal::dim`] standard Normal variates from `rng` in coordinate
    /// order.
    fn sample_reparam(&self, rng: &mut dyn rand::RngCore) -> (Vec<f64>, NoiseDraw);

    /// Log density `log q(z)`.
    fn log_density(&self, z: &[f64]) -> f64;

    /// Gradient of `log q(z)` with respect to `z`.
    fn grad_z_log_density(&self, z: &[f64]) -> Vec<f64>;

    /// Score function: gradient of `log q(z)` with respect to the flattened
    /// parameters, at fixed `z`.
    fn score(&self, z: &[f64]) -> Vec<f64>;

    /// Contracts a `z`-space cotangent against the path Jacobian:
    /// returns `cotangent^T (d path / d params)` as a flattened gradient.
    ///
    /// Fails with [`Error::InconsistentPath`] when `z` does not equal
    /// `path(eps)` within [`INCONSISTENT_PATH_TOL`], which catches samples
    /// that were shuffled, mutated, or paired with the wrong noise.
    fn velocity_vjp(&self, z: &[f64], eps: &NoiseDraw, cotangent: &[f64]) -> Result<Vec<f64>>;

    /// Marginal mean and standard deviation of coordinate `i`, used to place
    /// quadrature grids.
    fn marginal_mean_sd(&self, i: usize) -> (f64, f64);
}

fn draw_std_normals(d: usize, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn path_consistency(z: &[f64], reconstruction: &[f64]) -> Result<()> {
    let max_dev = z
        .iter()
        .zip(reconstruction)
        .map(|(&a, &b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if max_dev > INCONSISTENT_PATH_TOL {
        Err(Error::InconsistentPath { max_dev })
    } else {
        Ok(())
    }
}

/// Diagonal Gaussian proposal, `q(z) = prod_i Normal(z_i; mu_i, exp(log_scale_i)^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldNormal {
    /// Per-coordinate means.
    pub mu: Vec<f64>,
    /// Per-coordinate log standard deviations.
    pub log_scale: Vec<f64>,
}

impl MeanFieldNormal {
    /// Proposal with the given means and log standard deviations.
    pub fn new(mu: Vec<f64>, log_scale: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Dim { expected: 1, got: 0 });
        }
        check_len(mu.len(), log_scale.len())?;
        Ok(Self { mu, log_scale })
    }

    /// Standard Normal proposal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], vec![0.0; d]).expect("d >= 1")
    }

    /// Per-coordinate standard deviations, `exp(log_scale)`.
    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.iter().map(|&l| l.exp()).collect()
    }
}

impl Proposal for MeanFieldNormal {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn param_len(&self) -> usize {
        2 * self.mu.len()
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_len());
        flat.extend_from_slice(&self.mu);
        flat.extend_from_slice(&self.log_scale);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Shape { expected: self.param_len(), got: flat.len() });
        }
        let d = self.dim();
        self.mu.copy_from_slice(&flat[..d]);
        self.log_scale.copy_from_slice(&flat[d..]);
        Ok(())
    }

    fn sample_reparam(&self, rng: &mut dyn rand::RngCore) -> (Vec<f64>, NoiseDraw) {
        let eps = draw_std_normals(self.dim(), rng);
        let z = self
            .mu
            .iter()
            .zip(&self.log_scale)
            .zip(&eps)
            .map(|((&m, &l), &e)| m + l.exp() * e)
            .collect();
        (z, NoiseDraw { eps })
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        z.iter()
            .zip(&self.mu)
            .zip(&self.log_scale)
            .map(|((&zi, &m), &l)| normal_logpdf(zi, m, l.exp()))
            .sum()
    }

    fn grad_z_log_density(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dim());
        z.iter()
            .zip(&self.mu)
            .zip(&self.log_scale)
            .map(|((&zi, &m), &l)| {
                let v = (2.0 * l).exp();
                -(zi - m) / v
            })
            .collect()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dim());
        let d = self.dim();
        let mut s = vec![0.0; 2 * d];
        for i in 0..d {
            let sd = self.log_scale[i].exp();
            let t = (z[i] - self.mu[i]) / sd;
            s[i] = t / sd;
            s[d + i] = t * t - 1.0;
        }
        s
    }

    fn velocity_vjp(&self, z: &[f64], eps: &NoiseDraw, cotangent: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_len(d, z.len())?;
        check_len(d, eps.eps.len())?;
        check_len(d, cotangent.len())?;
        let reconstruction: Vec<f64> = self
            .mu
            .iter()
            .zip(&self.log_scale)
            .zip(&eps.eps)
            .map(|((&m, &l), &e)| m + l.exp() * e)
            .collect();
        path_consistency(z, &reconstruction)?;
        let mut grad = vec![0.0; 2 * d];
        for i in 0..d {
            grad[i] = cotangent[i];
            grad[d + i] = cotangent[i] * self.log_scale[i].exp() * eps.eps[i];
        }
        Ok(grad)
    }

    fn marginal_mean_sd(&self, i: usize) -> (f64, f64) {
        (self.mu[i], self.log_scale[i].exp())
    }
}

/// Gaussian proposal with a full Cholesky factor, `z = mu + L eps`.
///
/// `L` has diagonal `exp(chol_log_diag)` and free strictly-lower entries
/// stored row-major in `chol_offdiag` (entry `(i, j)` with `i > j` lives at
/// index `i (i - 1) / 2 + j`).
#[derive(Debug, Clone, PartialEq)]
pub struct FullRankNormal {
    /// Mean vector.
    pub mu: Vec<f64>,
    /// Log of the Cholesky diagonal.
    pub chol_log_diag: Vec<f64>,
    /// Strictly-lower Cholesky entries, packed row-major.
    pub chol_offdiag: Vec<f64>,
}

/// Packed index of strictly-lower entry `(i, j)` with `i > j`.
pub fn offdiag_index(i: usize, j: usize) -> usize {
    debug_assert!(i > j);
    i * (i - 1) / 2 + j
}

impl FullRankNormal {
    /// Proposal with the given mean and Cholesky parameterization.
    pub fn new(mu: Vec<f64>, chol_log_diag: Vec<f64>, chol_offdiag: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Dim { expected: 1, got: 0 });
        }
        check_len(mu.len(), chol_log_diag.len())?;
        let d = mu.len();
        check_len(d * (d - 1) / 2, chol_offdiag.len())?;
        Ok(Self { mu, chol_log_diag, chol_offdiag })
    }

    /// Standard Normal proposal in `d` dimensions (identity factor).
    pub fn standard(d: usize) -> Self {
        Self::new(vec![0.0; d], vec![0.0; d], vec![0.0; d * (d - 1) / 2]).expect("d >= 1")
    }

    /// Full-rank proposal matching a mean-field one, with zero off-diagonals.
    pub fn from_mean_field(mf: &MeanFieldNormal) -> Self {
        let d = mf.dim();
        Self::new(mf.mu.clone(), mf.log_scale.clone(), vec![0.0; d * (d - 1) / 2])
            .expect("mean-field proposal is well-formed")
    }

    /// Dense row-major `d x d` lower-triangular factor `L`.
    pub fn chol_dense(&self) -> Vec<f64> {
        let d = self.mu.len();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            l[i * d + i] = self.chol_log_diag[i].exp();
            for j in 0..i {
                l[i * d + j] = self.chol_offdiag[offdiag_index(i, j)];
            }
        }
        l
    }

    fn whiten(&self, z: &[f64]) -> Vec<f64> {
        let d = self.mu.len();
        let diff: Vec<f64> = z.iter().zip(&self.mu).map(|(&zi, &m)| zi - m).collect();
        tri_solve_lower(&self.chol_dense(), d, &diff)
    }
}

impl Proposal for FullRankNormal {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn param_len(&self) -> usize {
        let d = self.mu.len();
        2 * d + d * (d - 1) / 2
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_len());
        flat.extend_from_slice(&self.mu);
        flat.extend_from_slice(&self.chol_log_diag);
        flat.extend_from_slice(&self.chol_offdiag);
        flat
    }

    fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_len() {
            return Err(Error::Shape { expected: self.param_len(), got: flat.len() });
        }
        let d = self.dim();
        self.mu.copy_from_slice(&flat[..d]);
        self.chol_log_diag.copy_from_slice(&flat[d..2 * d]);
        self.chol_offdiag.copy_from_slice(&flat[2 * d..]);
        Ok(())
    }

    fn sample_reparam(&self, rng: &mut dyn rand::RngCore) -> (Vec<f64>, NoiseDraw) {
        let d = self.dim();
        let eps = draw_std_normals(d, rng);
        let le = tri_matvec(&self.chol_dense(), d, &eps);
        let z = self.mu.iter().zip(&le).map(|(&m, &v)| m + v).collect();
        (z, NoiseDraw { eps })
    }

    fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        let d = self.dim();
        let y = self.whiten(z);
        let log_det: f64 = self.chol_log_diag.iter().sum();
        let sq: f64 = y.iter().map(|&v| v * v).sum();
        -0.5 * d as f64 * LN_2PI - log_det - 0.5 * sq
    }

    fn grad_z_log_density(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dim());
        let d = self.dim();
        let y = self.whiten(z);
        let lt_y = tri_solve_lower_t(&self.chol_dense(), d, &y);
        lt_y.iter().map(|&v| -v).collect()
    }

    fn score(&self, z: &[f64]) -> Vec<f64> {
        debug_assert_eq!(z.len(), self.dim());
        let d = self.dim();
        let l = self.chol_dense();
        let y = self.whiten(z);
        let lt_y = tri_solve_lower_t(&l, d, &y);
        let mut s = vec![0.0; self.param_len()];
        s[..d].copy_from_slice(&lt_y);
        for i in 0..d {
            s[d + i] = lt_y[i] * y[i] * l[i * d + i] - 1.0;
            for j in 0..i {
                s[2 * d + offdiag_index(i, j)] = lt_y[i] * y[j];
            }
        }
        s
    }

    fn velocity_vjp(&self, z: &[f64], eps: &NoiseDraw, cotangent: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_len(d, z.len())?;
        check_len(d, eps.eps.len())?;
        check_len(d, cotangent.len())?;
        let l = self.chol_dense();
        let le = tri_matvec(&l, d, &eps.eps);
        let reconstruction: Vec<f64> =
            self.mu.iter().zip(&le).map(|(&m, &v)| m + v).collect();
        path_consistency(z, &reconstruction)?;
        let mut grad = vec![0.0; self.param_len()];
        grad[..d].copy_from_slice(cotangent);
        for i in 0..d {
            grad[d + i] = cotangent[i] * l[i * d + i] * eps.eps[i];
            for j in 0..i {
                grad[2 * d + offdiag_index(i, j)] = cotangent[i] * eps.eps[j];
            }
        }
        Ok(grad)
    }

    fn marginal_mean_sd(&self, i: usize) -> (f64, f64) {
        // Marginal variance is the squared norm of row i of L.
        let mut var = self.chol_log_diag[i].exp().powi(2);
        for j in 0..i {
            var += self.chol_offdiag[offdiag_index(i, j)].powi(2);
        }
        (self.mu[i], var.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn fd_score<P: Proposal + Clone>(p: &P, z: &[f64], h: f64) -> Vec<f64> {
        let flat = p.params_flat();
        (0..flat.len())
            .map(|k| {
                let mut hi = p.clone();
                let mut lo = p.clone();
                let mut fh = flat.clone();
                fh[k] += h;
                hi.set_params_flat(&fh).unwrap();
                fh[k] -= 2.0 * h;
                lo.set_params_flat(&fh).unwrap();
                (hi.log_density(z) - lo.log_density(z)) / (2.0 * h)
            })
            .collect()
    }

    fn fd_velocity_vjp<P: Proposal + Clone>(
        p: &P,
        eps: &NoiseDraw,
        cot: &[f64],
        h: f64,
    ) -> Vec<f64> {
        // Finite-difference the path z(params) at fixed eps, then contract
        // the Jacobian columns against the cotangent.
        let flat = p.params_flat();
        (0..flat.len())
            .map(|k| {
                let mut hi = p.clone();
                let mut lo = p.clone();
                let mut fh = flat.clone();
                fh[k] += h;
                hi.set_params_flat(&fh).unwrap();
                fh[k] -= 2.0 * h;
                lo.set_params_flat(&fh).unwrap();
                let z_hi = reconstruct(&hi, eps);
                let z_lo = reconstruct(&lo, eps);
                z_hi.iter()
                    .zip(&z_lo)
                    .zip(cot)
                    .map(|((&a, &b), &c)| c * (a - b) / (2.0 * h))
                    .sum()
            })
            .collect()
    }

    // Evaluates path(eps) from the flattened parameters; both families are
    // affine in eps.
    fn reconstruct<P: Proposal>(p: &P, eps: &NoiseDraw) -> Vec<f64> {
        let d = p.dim();
        let flat = p.params_flat();
        let mu = &flat[..d];
        if flat.len() == 2 * d {
            // Mean-field layout: [mu | log_scale].
            return mu
                .iter()
                .zip(&flat[d..])
                .zip(&eps.eps)
                .map(|((&m, &l), &e)| m + l.exp() * e)
                .collect();
        }
        // Full-rank layout: [mu | log-diag | packed strictly-lower].
        let log_diag = &flat[d..2 * d];
        let off = &flat[2 * d..];
        (0..d)
            .map(|i| {
                let mut acc = mu[i] + log_diag[i].exp() * eps.eps[i];
                for j in 0..i {
                    acc += off[offdiag_index(i, j)] * eps.eps[j];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn mean_field_params_round_trip() {
        let mut q = MeanFieldNormal::new(vec![0.5, -1.0], vec![0.1, -0.3]).unwrap();
        let flat = q.params_flat();
        assert_eq!(flat, vec![0.5, -1.0, 0.1, -0.3]);
        q.set_params_flat(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(q.mu, vec![1.0, 2.0]);
        assert_eq!(q.log_scale, vec![3.0, 4.0]);
        assert!(matches!(
            q.set_params_flat(&[1.0]),
            Err(Error::Shape { expected: 4, got: 1 })
        ));
    }

    #[test]
    fn mean_field_log_density_matches_hand_value() {
        let q = MeanFieldNormal::new(vec![1.0], vec![0.5f64.ln()]).unwrap();
        // Normal(1, 0.25) at 0: -0.5 ln(2 pi) - ln(0.5) - 0.5 * (1/0.5)^2
        let expect = -0.5 * LN_2PI - 0.5f64.ln() - 2.0;
        assert_relative_eq!(q.log_density(&[0.0]), expect, epsilon = 1e-14);
    }

    #[test]
    fn mean_field_grad_and_score_match_finite_differences() {
        let q = MeanFieldNormal::new(vec![0.3, -0.8], vec![0.2, -0.4]).unwrap();
        let z = [1.1, 0.4];
        let grad = q.grad_z_log_density(&z);
        for i in 0..2 {
            let h = 1e-6;
            let mut zh = z;
            zh[i] += h;
            let up = q.log_density(&zh);
            zh[i] -= 2.0 * h;
            let dn = q.log_density(&zh);
            assert_relative_eq!(grad[i], (up - dn) / (2.0 * h), epsilon = 1e-6);
        }
        let score = q.score(&z);
        let fd = fd_score(&q, &z, 1e-6);
        for (a, b) in score.iter().zip(&fd) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn mean_field_velocity_matches_jacobian_contraction() {
        let q = MeanFieldNormal::new(vec![0.3, -0.8], vec![0.2, -0.4]).unwrap();
        let mut rng = rng_from_seed(3);
        let (z, eps) = q.sample_reparam(&mut rng);
        let cot = [0.7, -1.3];
        let got = q.velocity_vjp(&z, &eps, &cot).unwrap();
        let fd = fd_velocity_vjp(&q, &eps, &cot, 1e-6);
        for (a, b) in got.iter().zip(&fd) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn velocity_rejects_off_path_samples() {
        let q = MeanFieldNormal::standard(2);
        let mut rng = rng_from_seed(0);
        let (mut z, eps) = q.sample_reparam(&mut rng);
        z[1] += 1e-6;
        match q.velocity_vjp(&z, &eps, &[1.0, 1.0]) {
            Err(Error::InconsistentPath { max_dev }) => {
                assert_relative_eq!(max_dev, 1e-6, epsilon = 1e-9)
            }
            other => panic!("expected InconsistentPath, got {other:?}"),
        }
    }

    #[test]
    fn full_rank_params_round_trip_and_dense_factor() {
        let q = FullRankNormal::new(
            vec![1.0, 2.0, 3.0],
            vec![0.0, 0.1, -0.1],
            vec![0.5, -0.2, 0.3],
        )
        .unwrap();
        assert_eq!(q.param_len(), 9);
        let flat = q.params_flat();
        let mut q2 = FullRankNormal::standard(3);
        q2.set_params_flat(&flat).unwrap();
        assert_eq!(q, q2);
        let l = q.chol_dense();
        assert_relative_eq!(l[1 * 3 + 0], 0.5);
        assert_relative_eq!(l[2 * 3 + 0], -0.2);
        assert_relative_eq!(l[2 * 3 + 1], 0.3);
        assert_relative_eq!(l[0], 1.0);
        assert_eq!(l[0 * 3 + 1], 0.0);
    }

    #[test]
    fn full_rank_with_zero_offdiag_matches_mean_field() {
        let mf = MeanFieldNormal::new(vec![0.4, -0.9], vec![0.3, -0.2]).unwrap();
        let fr = FullRankNormal::from_mean_field(&mf);
        let z = [0.9, -1.4];
        assert_relative_eq!(fr.log_density(&z), mf.log_density(&z), epsilon = 1e-13);
        let g_fr = fr.grad_z_log_density(&z);
        let g_mf = mf.grad_z_log_density(&z);
        for (a, b) in g_fr.iter().zip(&g_mf) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
        // Scores agree on the shared [mu | log-diag] prefix and the
        // off-diagonal block exists but plays no role at zero.
        let s_fr = fr.score(&z);
        let s_mf = mf.score(&z);
        for i in 0..4 {
            assert_relative_eq!(s_fr[i], s_mf[i], epsilon = 1e-12);
        }
        // Same draws from the same seed.
        let (z1, e1) = mf.sample_reparam(&mut rng_from_seed(11));
        let (z2, e2) = fr.sample_reparam(&mut rng_from_seed(11));
        assert_eq!(e1, e2);
        for (a, b) in z1.iter().zip(&z2) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn full_rank_grad_score_and_velocity_match_finite_differences() {
        let q = FullRankNormal::new(
            vec![0.2, -0.5, 1.0],
            vec![0.1, -0.3, 0.2],
            vec![0.4, -0.7, 0.6],
        )
        .unwrap();
        let z = [1.0, 0.5, -0.8];
        let grad = q.grad_z_log_density(&z);
        for i in 0..3 {
            let h = 1e-6;
            let mut zh = z;
            zh[i] += h;
            let up = q.log_density(&zh);
            zh[i] -= 2.0 * h;
            let dn = q.log_density(&zh);
            assert_relative_eq!(grad[i], (up - dn) / (2.0 * h), epsilon = 1e-5);
        }

        let score = q.score(&z);
        let fd = fd_score(&q, &z, 1e-6);
        for (a, b) in score.iter().zip(&fd) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }

        let mut rng = rng_from_seed(5);
        let (zs, eps) = q.sample_reparam(&mut rng);
        let cot = [0.3, -1.1, 0.9];
        let got = q.velocity_vjp(&zs, &eps, &cot).unwrap();
        let fdv = fd_velocity_vjp(&q, &eps, &cot, 1e-6);
        for (a, b) in got.iter().zip(&fdv) {
            assert_relative_eq!(a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn full_rank_marginals_account_for_correlation() {
        let q =
            FullRankNormal::new(vec![0.0, 0.0], vec![0.0, 0.0], vec![3.0f64.sqrt()]).unwrap();
        let (m0, s0) = q.marginal_mean_sd(0);
        let (m1, s1) = q.marginal_mean_sd(1);
        assert_eq!((m0, m1), (0.0, 0.0));
        assert_relative_eq!(s0, 1.0);
        assert_relative_eq!(s1, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn samples_have_roughly_correct_moments() {
        let q = MeanFieldNormal::new(vec![2.0], vec![0.5f64.ln()]).unwrap();
        let mut rng = rng_from_seed(42);
        let mut acc = crate::math::RunningMoments::new();
        for _ in 0..20_000 {
            let (z, _) = q.sample_reparam(&mut rng);
            acc.push(z[0]);
        }
        assert_abs_diff_eq!(acc.mean(), 2.0, epsilon = 0.02);
        assert_abs_diff_eq!(acc.variance(), 0.25, epsilon = 0.01);
    }
}
