use std::sync::Arc;

use proptest::prelude::*;
use rebirth_lab::gaussian_lab::{covariance_matrix, factorize, CovarianceKind, KernelCovariance};
use rebirth_lab::levy_kernels::{LevyExponentSpec, LevyKernels};
use rebirth_lab::measure::Measure;
use rebirth_lab::path_engine::{
    estimate_local_time, LocalTimeMethod, LocalTimeRequest, Normalization, PathBundle, SimConfig, Simulator,
};
use rebirth_lab::process::{BaseProcess, CaseId, Family};
use rebirth_lab::rebirth_kernels::{RebirthKernel, RebirthSpec};
use rebirth_lab::stats::{quantile, weighted_ks};
use rebirth_lab::verify::{local_ratio_series, uniform_ratio_series, IncrementSampling};

fn stable(alpha: f64) -> Arc<LevyKernels> {
    Arc::new(LevyKernels::new(LevyExponentSpec::stable(alpha, 1.0).unwrap()).unwrap())
}

fn brownian_base(case: CaseId) -> Arc<BaseProcess> {
    let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
    Arc::new(BaseProcess::new(case, Family::Levy(k), 1.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn u_beta_even_and_maximal_at_zero(alpha in 1.2f64..=2.0, beta in 0.2f64..3.0, x in 0.01f64..4.0) {
        let k = stable(alpha);
        let a = k.u_beta(beta, x).unwrap();
        let b = k.u_beta(beta, -x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        prop_assert!(a < k.u_beta(beta, 0.0).unwrap());
    }

    #[test]
    fn sigma2_is_twice_the_covariance_drop(alpha in 1.2f64..=2.0, beta in 0.2f64..3.0, x in 0.01f64..4.0) {
        let k = stable(alpha);
        let s = k.sigma2(beta, x).unwrap();
        let d = 2.0 * (k.u_beta(beta, 0.0).unwrap() - k.u_beta(beta, x).unwrap());
        prop_assert!((s - d).abs() <= 1e-7 * d.max(1e-9), "{} vs {}", s, d);
    }

    #[test]
    fn v_beta_symmetric_and_vanishes_at_zero(beta in 0.2f64..3.0, x in -3.0f64..3.0, y in -3.0f64..3.0) {
        let k = stable(1.7);
        let vxy = k.v_beta(beta, x, y).unwrap();
        prop_assert!((vxy - k.v_beta(beta, y, x).unwrap()).abs() < 1e-10);
        prop_assert!(k.v_beta(beta, 0.0, y).unwrap().abs() < 1e-10);
        prop_assert!(vxy <= k.u_beta(beta, x - y).unwrap() + 1e-12);
    }

    #[test]
    fn w_rows_integrate_to_one_over_p(beta in 0.3f64..2.0, p in 0.3f64..2.0, atom in -1.0f64..1.0, x in -1.0f64..1.0) {
        let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
        let base = Arc::new(BaseProcess::new(CaseId::Case1, Family::Levy(k), beta).unwrap());
        let rk = RebirthKernel::new(base, Measure::dirac(atom), p).unwrap();
        let row = rk.row_integral(x, -40.0, 40.0).unwrap();
        prop_assert!((row * p - 1.0).abs() < 1e-6, "row {}", row);
    }

    #[test]
    fn covariance_matrices_are_psd(seed in any::<u64>(), n in 5usize..25) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let cov = KernelCovariance::new(CovarianceKind::UBeta { beta: 1.0 }, Family::Levy(stable(1.5))).unwrap();
        let m = covariance_matrix(&grid, &cov).unwrap();
        let eig = m.clone().symmetric_eigenvalues();
        let max = eig.max();
        prop_assert!(eig.min() >= -1e-8 * max);
        prop_assert!(factorize(&m, None).is_ok());
    }

    #[test]
    fn bundle_roundtrip_and_decomposition(seed in any::<u64>(), eps in 0.04f64..0.2) {
        let base = brownian_base(CaseId::Case1);
        let sim = Simulator::new(base.clone(), SimConfig::new(1e-3, 2.0, 0.05, seed)).unwrap();
        let b = sim.simulate_rebirth(&RebirthSpec::full(Measure::dirac(0.0)), 0.0).unwrap();
        let back = PathBundle::from_bytes(&b.to_bytes()).unwrap();
        prop_assert_eq!(&back.to_bytes(), &b.to_bytes());
        let grid = vec![-0.5, 0.0, 0.5];
        let req = LocalTimeRequest::new(grid, LocalTimeMethod::Occupation { epsilon: eps });
        let est = estimate_local_time(&base, &back, req, Normalization::Full(CaseId::Case1)).unwrap();
        for (i, tot) in est.final_values.iter().enumerate() {
            let parts: f64 = est.cycle_totals.iter().map(|c| c[i]).sum();
            prop_assert!((tot - parts).abs() <= 1e-12);
            prop_assert!(*tot >= 0.0);
        }
    }

    #[test]
    fn ratio_series_invariants(vals in prop::collection::vec(-5.0f64..5.0, 257), c in 0.1f64..10.0) {
        let ks: Vec<u32> = (1..=8).collect();
        let spacing = 1.0 / 256.0;
        let phi = |h: f64| (2.0 * h * (1.0 / h).ln()).sqrt();
        let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
        for s in [IncrementSampling::Dyadic, IncrementSampling::Sliding] {
            let a = uniform_ratio_series(&vals, spacing, &ks, s, phi, 1.0).unwrap();
            let b = uniform_ratio_series(&scaled, spacing, &ks, s, phi, c).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
        let dy = uniform_ratio_series(&vals, spacing, &ks, IncrementSampling::Dyadic, phi, 1.0).unwrap();
        let sl = uniform_ratio_series(&vals, spacing, &ks, IncrementSampling::Sliding, phi, 1.0).unwrap();
        prop_assert!(dy.iter().zip(&sl).all(|(d, s)| d <= s));
        prop_assert!(uniform_ratio_series(&vals, spacing, &ks, IncrementSampling::Dyadic, phi, 0.0).is_none());
        let phil = |t: f64| (2.0 * t * (1.0 / t).ln().ln().max(0.1)).sqrt();
        let loc = local_ratio_series(&vals, 128, spacing, &(1..=8).collect::<Vec<_>>(), 0.5, phil, 1.0).unwrap();
        prop_assert!(loc.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ks_and_quantile_basics(a in prop::collection::vec(-3.0f64..3.0, 1..60), b in prop::collection::vec(-3.0f64..3.0, 1..60)) {
        let wa = vec![1.0; a.len()];
        let wb = vec![1.0; b.len()];
        let d = weighted_ks(&a, &wa, &b, &wb);
        prop_assert!((0.0..=1.0).contains(&d));
        prop_assert!((d - weighted_ks(&b, &wb, &a, &wa)).abs() < 1e-12);
        prop_assert!(weighted_ks(&a, &wa, &a, &wa) < 1e-12);
        let q = quantile(&a, 0.5);
        let lo = a.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(q >= lo && q <= hi);
    }
}
