//! Property tests for the invariants the estimators and plumbing rely on.

use proptest::prelude::*;
use rand::RngCore;
use rvrs::config::Config;
use rvrs::gradients::rvrs_phi_gradient;
use rvrs::math::{log_sigmoid, sigmoid, softplus};
use rvrs::optimize::lr_schedule;
use rvrs::proposal::{FullRankNormal, MeanFieldNormal, Proposal};
use rvrs::rng::RngStreams;
use rvrs::sampler::{rejection_sample, AcceptanceConfig, AcceptedBatch};
use rvrs::target::AnalyticGaussianTarget;

fn finite(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    range.prop_filter("finite", |x| x.is_finite())
}

proptest! {
    // The guarded acceptance probability must stay inside [epsilon, 1] and
    // its log must stay finite for any finite log ratio, however extreme.
    #[test]
    fn acceptance_stays_in_range(
        log_ratio in finite(-1e6..1e6),
        threshold in finite(-500.0..500.0),
        epsilon in 0.0..0.5f64,
    ) {
        let cfg = AcceptanceConfig::new(threshold, epsilon).unwrap();
        let acc = cfg.acceptance_parts(log_ratio);
        prop_assert!(acc.a_raw >= 0.0 && acc.a_raw <= 1.0);
        prop_assert!(acc.a >= epsilon && acc.a <= 1.0);
        prop_assert!(!acc.a.is_nan());
        if epsilon > 0.0 || log_ratio + threshold > -700.0 {
            prop_assert!(acc.log_a.is_finite());
        }
        prop_assert!(acc.log_a <= 0.0);
    }

    // The reparameterization contraction is linear in the cotangent.
    #[test]
    fn velocity_contraction_is_linear(
        mu in prop::collection::vec(finite(-3.0..3.0), 3),
        log_scale in prop::collection::vec(finite(-2.0..2.0), 3),
        c1 in prop::collection::vec(finite(-5.0..5.0), 3),
        c2 in prop::collection::vec(finite(-5.0..5.0), 3),
        k in finite(-4.0..4.0),
        seed in 0u64..1000,
    ) {
        let q = MeanFieldNormal::new(mu, log_scale).unwrap();
        let (z, eps) = q.sample_reparam(&mut RngStreams::new(seed).stream(0));
        let sum: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = c1.iter().map(|a| k * a).collect();
        let v1 = q.velocity_vjp(&z, &eps, &c1).unwrap();
        let v2 = q.velocity_vjp(&z, &eps, &c2).unwrap();
        let v_sum = q.velocity_vjp(&z, &eps, &sum).unwrap();
        let v_scaled = q.velocity_vjp(&z, &eps, &scaled).unwrap();
        for i in 0..v1.len() {
            prop_assert!((v_sum[i] - (v1[i] + v2[i])).abs() <= 1e-9 * (1.0 + v_sum[i].abs()));
            prop_assert!((v_scaled[i] - k * v1[i]).abs() <= 1e-9 * (1.0 + v_scaled[i].abs()));
        }
    }

    // Proposal parameters survive a flatten/unflatten round trip bitwise.
    #[test]
    fn params_round_trip(
        mu in prop::collection::vec(finite(-10.0..10.0), 1..5),
        log_scale_seed in prop::collection::vec(finite(-3.0..3.0), 1..5),
    ) {
        let d = mu.len().min(log_scale_seed.len());
        let q = MeanFieldNormal::new(mu[..d].to_vec(), log_scale_seed[..d].to_vec()).unwrap();
        let mut back = MeanFieldNormal::standard(d);
        back.set_params_flat(&q.params_flat()).unwrap();
        prop_assert_eq!(q.params_flat(), back.params_flat());

        let fr = FullRankNormal::from_mean_field(&q);
        let mut fr_back = FullRankNormal::standard(d);
        fr_back.set_params_flat(&fr.params_flat()).unwrap();
        prop_assert_eq!(fr.params_flat(), fr_back.params_flat());
    }

    // A full-rank proposal with diagonal factor is the mean-field proposal:
    // same density, same samples, same contraction on the shared parameters.
    #[test]
    fn diagonal_full_rank_matches_mean_field(
        mu in prop::collection::vec(finite(-3.0..3.0), 2..4),
        log_scale_seed in prop::collection::vec(finite(-1.5..1.5), 2..4),
        point in prop::collection::vec(finite(-4.0..4.0), 2..4),
        seed in 0u64..1000,
    ) {
        let d = mu.len().min(log_scale_seed.len()).min(point.len());
        let mf = MeanFieldNormal::new(mu[..d].to_vec(), log_scale_seed[..d].to_vec()).unwrap();
        let fr = FullRankNormal::from_mean_field(&mf);

        let z = &point[..d];
        prop_assert!((mf.log_density(z) - fr.log_density(z)).abs() < 1e-10);

        let (z_mf, eps_mf) = mf.sample_reparam(&mut RngStreams::new(seed).stream(0));
        let (z_fr, eps_fr) = fr.sample_reparam(&mut RngStreams::new(seed).stream(0));
        for i in 0..d {
            prop_assert!((z_mf[i] - z_fr[i]).abs() < 1e-12);
        }

        let cot: Vec<f64> = (0..d).map(|i| (i as f64) - 0.7).collect();
        let g_mf = mf.velocity_vjp(&z_mf, &eps_mf, &cot).unwrap();
        let g_fr = fr.velocity_vjp(&z_fr, &eps_fr, &cot).unwrap();
        // Mean block matches directly; the diagonal of the factor gradient
        // matches the scale gradient.
        for i in 0..d {
            prop_assert!((g_mf[i] - g_fr[i]).abs() < 1e-10);
            let fr_diag = g_fr[d + i];
            prop_assert!((g_mf[d + i] - fr_diag).abs() < 1e-10);
        }
    }

    // Gradient estimates must not depend on the order samples arrived in.
    #[test]
    fn estimator_is_permutation_invariant(seed in 0u64..500, threshold in -1.5..1.5f64) {
        let target = AnalyticGaussianTarget::scalar(0.0, 0.6, 1.3);
        let q = MeanFieldNormal::standard(1);
        let cfg = AcceptanceConfig::new(threshold, 1e-4).unwrap();
        let mut rng = RngStreams::new(seed).stream(0);
        let batch = rejection_sample(&target, &[0.0], &q, &cfg, &mut rng, 4, None).unwrap();

        let perm = [2usize, 0, 3, 1];
        let reordered = AcceptedBatch {
            z: perm.iter().map(|&i| batch.z[i].clone()).collect(),
            eps: perm.iter().map(|&i| batch.eps[i].clone()).collect(),
            log_p: perm.iter().map(|&i| batch.log_p[i]).collect(),
            log_q: perm.iter().map(|&i| batch.log_q[i]).collect(),
            a_raw: perm.iter().map(|&i| batch.a_raw[i]).collect(),
            a: perm.iter().map(|&i| batch.a[i]).collect(),
            elbo_integrand: perm.iter().map(|&i| batch.elbo_integrand[i]).collect(),
            proposals_used: perm.iter().map(|&i| batch.proposals_used[i]).collect(),
        };
        let g = rvrs_phi_gradient(&target, &[0.0], &q, &cfg, &batch).unwrap();
        let g_perm = rvrs_phi_gradient(&target, &[0.0], &q, &cfg, &reordered).unwrap();
        for (a, b) in g.iter().zip(&g_perm) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    // Swapping the two samples of an S=2 batch changes nothing at all.
    #[test]
    fn two_sample_swap_is_bitwise_invariant(seed in 0u64..500) {
        let target = AnalyticGaussianTarget::scalar(0.0, 0.4, 0.9);
        let q = MeanFieldNormal::standard(1);
        let cfg = AcceptanceConfig::new(0.3, 0.0).unwrap();
        let mut rng = RngStreams::new(seed).stream(1);
        let batch = rejection_sample(&target, &[0.0], &q, &cfg, &mut rng, 2, None).unwrap();
        let swapped = AcceptedBatch {
            z: vec![batch.z[1].clone(), batch.z[0].clone()],
            eps: vec![batch.eps[1].clone(), batch.eps[0].clone()],
            log_p: vec![batch.log_p[1], batch.log_p[0]],
            log_q: vec![batch.log_q[1], batch.log_q[0]],
            a_raw: vec![batch.a_raw[1], batch.a_raw[0]],
            a: vec![batch.a[1], batch.a[0]],
            elbo_integrand: vec![batch.elbo_integrand[1], batch.elbo_integrand[0]],
            proposals_used: vec![batch.proposals_used[1], batch.proposals_used[0]],
        };
        let g = rvrs_phi_gradient(&target, &[0.0], &q, &cfg, &batch).unwrap();
        let g_swap = rvrs_phi_gradient(&target, &[0.0], &q, &cfg, &swapped).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&g), bits(&g_swap));
    }

    // Identical seeds give identical accepted batches; the sampler has no
    // hidden state.
    #[test]
    fn sampling_is_reproducible(seed in 0u64..2000, threshold in -2.0..2.0f64) {
        let target = AnalyticGaussianTarget::scalar(0.0, -0.3, 1.1);
        let q = MeanFieldNormal::standard(1);
        let cfg = AcceptanceConfig::new(threshold, 1e-6).unwrap();
        let a = rejection_sample(&target, &[0.0], &q, &cfg, &mut RngStreams::new(seed).stream(7), 3, None)
            .unwrap();
        let b = rejection_sample(&target, &[0.0], &q, &cfg, &mut RngStreams::new(seed).stream(7), 3, None)
            .unwrap();
        prop_assert_eq!(
            a.z.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.z.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(a.proposals_used, b.proposals_used);
    }

    // Numerically stable links: no overflow, order preserved, exact limits.
    #[test]
    fn link_functions_are_stable(x in finite(-700.0..700.0)) {
        let s = sigmoid(x);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!(log_sigmoid(x) <= 0.0);
        prop_assert!(log_sigmoid(x).is_finite() || x < -700.0);
        prop_assert!(softplus(x) >= 0.0 && softplus(x).is_finite());
        // softplus(x) - softplus(-x) = x exactly in exact arithmetic.
        prop_assert!((softplus(x) - softplus(-x) - x).abs() < 1e-9 * (1.0 + x.abs()));
        prop_assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
    }

    // The schedule only ever takes the three documented values and never
    // increases.
    #[test]
    fn lr_schedule_is_a_three_step_staircase(base in 1e-6..1.0f64, total in 1u64..10_000) {
        let mut last = f64::INFINITY;
        for iter in 0..total.min(300) {
            let lr = lr_schedule(base, iter, total);
            let expected = [base, base / 10.0, base / 100.0];
            prop_assert!(expected.iter().any(|e| (lr - e).abs() < 1e-18 * base.max(1.0)));
            prop_assert!(lr <= last);
            last = lr;
        }
        prop_assert!((lr_schedule(base, 0, total) - base).abs() < 1e-18);
    }

    // Unknown config keys always fail, whatever they are called.
    #[test]
    fn unknown_config_keys_always_error(suffix in "[a-z_]{1,12}") {
        let key = format!("k_{suffix}");
        let text = format!("total_iters = 5\n{key} = 1\n");
        let mut cfg = Config::parse(&text).unwrap();
        let _ = cfg.u64_or("total_iters", 0).unwrap();
        let err = cfg.ensure_consumed().unwrap_err().to_string();
        prop_assert!(err.contains(&key), "{err}");
    }

    // Threshold feedback pushes toward the target rate: zero at the fixed
    // point, positive above it, negative below it.
    #[test]
    fn threshold_feedback_points_at_the_target(z_tgt in 0.05..0.95f64, delta in 0.01..0.2f64) {
        use rvrs::gradients::t_gradient_from_a;
        let at = |a: f64| t_gradient_from_a(&[a, a, a, a], z_tgt).unwrap();
        prop_assert!(at(z_tgt).abs() < 1e-12);
        let hi = (z_tgt + delta).min(0.999);
        let lo = (z_tgt - delta).max(0.001);
        prop_assert!(at(hi) > 0.0);
        prop_assert!(at(lo) < 0.0);
    }
}

// RNG streams keyed by different pairs never alias, within the minor range
// the code uses.
proptest! {
    #[test]
    fn keyed_streams_do_not_alias(
        seed in 0u64..100,
        major_a in 0u64..5000,
        minor_a in 0u64..5000,
        major_b in 0u64..5000,
        minor_b in 0u64..5000,
    ) {
        prop_assume!((major_a, minor_a) != (major_b, minor_b));
        let s = RngStreams::new(seed);
        let a = s.keyed(major_a, minor_a).next_u64();
        let b = s.keyed(major_b, minor_b).next_u64();
        prop_assert_ne!(a, b);
    }
}
