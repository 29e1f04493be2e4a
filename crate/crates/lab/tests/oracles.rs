//! Independent closed forms and brute-force values for the kernels and the path engine.

use std::f64::consts::PI;
use std::sync::Arc;

use rebirth_lab::diffusion_kernels::{DiffusionKernels, DiffusionSpec};
use rebirth_lab::levy_kernels::{c_r, LevyExponentSpec, LevyKernels};
use rebirth_lab::measure::Measure;
use rebirth_lab::path_engine::{DeathCause, SimConfig, Simulator};
use rebirth_lab::process::{BaseProcess, CaseId, Family};
use rebirth_lab::rebirth_kernels::{f_of, RebirthKernel};
use statrs::distribution::{ContinuousCDF, Normal};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn brownian(case: CaseId) -> Arc<BaseProcess> {
    let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
    Arc::new(BaseProcess::new(case, Family::Levy(k), 1.0).unwrap())
}

/// (1/π)∫₀^∞ (1 − cos λx) λ^{−1.5} dλ by the substitution λ = s², midpoint
/// rule on [0, S] plus the averaged tail ∫_S^∞ λ^{−1.5} dλ.
fn brute_phi_stable15(x: f64) -> f64 {
    let s_max = 400.0;
    let n = 4_000_000;
    let h = s_max / n as f64;
    let mut sum = 0.0;
    for i in 0..n {
        let s = (i as f64 + 0.5) * h;
        let l = s * s;
        sum += (1.0 - (l * x).cos()) / (l * s) * 2.0 * s * h;
    }
    let tail = 2.0 / s_max;
    (sum + tail) / PI
}

#[test]
fn phi_for_stable_three_halves() {
    let k = LevyKernels::new(LevyExponentSpec::stable(1.5, 1.0).unwrap()).unwrap();
    let x: f64 = 0.3;
    let closed = (2.0 / PI).sqrt() * x.sqrt();
    let got = k.phi0(x).unwrap();
    assert!(rel(got, closed) < 1e-6, "phi {got} vs {closed}");
    let brute = brute_phi_stable15(x);
    assert!(rel(got, brute) < 1e-3, "phi {got} vs brute force {brute}");
}

#[test]
fn c_three_halves() {
    assert!((c_r(1.5).unwrap() - 1.595769).abs() < 1e-6);
    assert!((c_r(1.5).unwrap() - 2.0 * (2.0 / PI).sqrt()).abs() < 1e-9);
}

#[test]
fn stable_sigma2_matches_asymptote_exactly() {
    // For a pure power exponent σ₀² is exactly C_r/(xψ(1/x)).
    let k = LevyKernels::new(LevyExponentSpec::stable(1.5, 1.0).unwrap()).unwrap();
    for x in [0.01, 0.1, 0.7] {
        let a = k.sigma2(0.0, x).unwrap();
        let b = k.sigma2_asymptotic(x).unwrap();
        assert!(rel(a, b) < 1e-6, "x={x}: {a} vs {b}");
    }
}

#[test]
fn f_for_uniform_rebirth() {
    // u^{β+p}(x) = e^{−2|x|}/2 for β = p = 1.
    let base = brownian(CaseId::Case1);
    let (a, b) = (-1.0, 1.0);
    let mu = Measure::uniform(a, b, 4001);
    for y in [-0.5, 0.0, 0.3, 0.9] {
        let want = (2.0 - (-2.0 * (y - a)).exp() - (-2.0 * (b - y)).exp()) / (4.0 * (b - a));
        let got = f_of(&base, 1.0, &mu, y).unwrap();
        assert!(rel(got, want) < 1e-4, "f({y}) = {got}, want {want}");
    }
}

#[test]
fn case1_w_row_integral_and_asymmetry() {
    let rk = RebirthKernel::new(brownian(CaseId::Case1), Measure::dirac(1.0), 1.0).unwrap();
    assert!(rel(rk.row_integral(0.3, -30.0, 30.0).unwrap(), 1.0) < 1e-6);
    assert!((rk.w_p(0.0, 1.0).unwrap() - rk.w_p(1.0, 0.0).unwrap()).abs() > 0.1);
}

#[test]
fn case6_brownian_hitting_probability() {
    let d = Arc::new(DiffusionKernels::new(DiffusionSpec::bm(0.0, 60.0)).unwrap());
    let base = Arc::new(BaseProcess::new(CaseId::Case6, Family::Diffusion(d), 0.0).unwrap());
    let n = 4000;
    let mut hits = 0;
    for i in 0..n {
        let sim = Simulator::new(base.clone(), SimConfig::new(1e-3, 1.0, 0.05, 1000 + i)).unwrap();
        let b = sim.simulate_base_path(1.0).unwrap();
        if b.cycles[0].cause == DeathCause::HitZero {
            hits += 1;
        }
    }
    let p = hits as f64 / n as f64;
    let want = 2.0 * Normal::standard().cdf(-1.0);
    let se = (want * (1.0 - want) / n as f64).sqrt();
    assert!((p - want).abs() < 4.0 * se, "hit fraction {p} vs {want} (se {se})");
}
