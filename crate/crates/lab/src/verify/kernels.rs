//! Deterministic kernel checks: closed forms, positive definiteness and
//! scalar identities.

use std::sync::Arc;

use nalgebra::SymmetricEigen;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linspace, CheckVerdict, Context, DistributionalTest, TestKind};
use super::{KERNEL_GOLDEN_SUITE, KERNEL_POSITIVE_DEFINITE, SCALAR_IDENTITIES};
use crate::diffusion_kernels::{Coefficients, DiffusionKernels, DiffusionSpec};
use crate::error::Result;
use crate::gaussian_lab::{covariance_matrix, Covariance, CovarianceKind, KernelCovariance};
use crate::levy_kernels::{c_r, LevyExponentSpec, LevyKernels};
use crate::measure::Measure;
use crate::process::{BaseProcess, CaseId, Family};
use crate::rebirth_kernels::{killing_laplace, RebirthKernel};
use crate::rng::{derive_seed, rng_from};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GoldenParams {
    pub betas: Vec<f64>,
    pub points: Vec<f64>,
}

impl Default for GoldenParams {
    fn default() -> Self {
        let pos = [0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 5.0];
        let points = pos.iter().flat_map(|&x| [x, -x]).collect();
        GoldenParams { betas: vec![0.5, 1.0, 2.0], points }
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Brownian exponent ψ = λ²/2 against closed forms.
pub fn kernel_golden_suite(ctx: &Context, params: &GoldenParams) -> Result<CheckVerdict> {
    let seed = ctx.check_seed(KERNEL_GOLDEN_SUITE);
    let mut v = CheckVerdict::new(KERNEL_GOLDEN_SUITE, params, seed);
    let tol = ctx.thresholds.kernel_rel_tol;
    let k = LevyKernels::new(LevyExponentSpec::brownian())?;
    let u = |b: f64, x: f64| (-(2.0 * b).sqrt() * x.abs()).exp() / (2.0 * b).sqrt();
    let pts = &params.points;
    // Same-sign partner points keep the killed kernels away from zero.
    let partner = |x: f64| 0.5 * x + 0.1 * x.signum();

    let mut worst = [0.0f64; 6];
    for &b in &params.betas {
        for &x in pts {
            worst[0] = worst[0].max(rel_err(k.u_beta(b, x)?, u(b, x)));
            let y = partner(x);
            let v_exact = u(b, x - y) - u(b, x) * u(b, y) / u(b, 0.0);
            worst[1] = worst[1].max(rel_err(k.v_beta(b, x, y)?, v_exact));
            worst[4] = worst[4].max(rel_err(k.sigma2(b, x)?, 2.0 * (u(b, 0.0) - u(b, x))));
        }
    }
    for &x in pts {
        let y = partner(x);
        worst[2] = worst[2].max(rel_err(k.frak_u0(x, y)?, x.abs() + y.abs() - (x - y).abs()));
        worst[3] = worst[3].max(rel_err(k.sigma2(0.0, x)?, 2.0 * x.abs()));
        worst[5] = worst[5].max(rel_err(k.phi0(x)?, x.abs()));
    }
    let names = ["u_beta", "v_beta", "frak_u0", "sigma2_zero", "sigma2_beta", "phi"];
    for (name, w) in names.iter().zip(worst) {
        v.tests.push(DistributionalTest::within(*name, TestKind::Tolerance, w, tol).with_grid(pts));
    }
    let c2 = c_r(2.0)?;
    let mut t = DistributionalTest::within("c_2", TestKind::Tolerance, (c2 - 1.0).abs(), tol);
    t.estimate = Some(c2);
    t.target = Some(1.0);
    v.tests.push(t);
    Ok(v.finalize(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositiveDefiniteParams {
    pub n_grids: usize,
    pub grid_size: usize,
    pub beta: f64,
    pub p: f64,
    pub stable_alpha: f64,
    /// Points are drawn from [−range, range] (or (0, range] for killed kernels).
    pub range: f64,
    /// Diffusion state space [−half_width, half_width].
    pub diffusion_half_width: f64,
    pub ou_theta: f64,
}

impl Default for PositiveDefiniteParams {
    fn default() -> Self {
        PositiveDefiniteParams {
            n_grids: 10,
            grid_size: 100,
            beta: 1.0,
            p: 1.0,
            stable_alpha: 1.5,
            range: 2.0,
            diffusion_half_width: 4.0,
            ou_theta: 1.0,
        }
    }
}

#[derive(Clone, Copy)]
enum Support {
    Line,
    Punctured,
    Positive,
}

/// Smallest over `n_grids` random grids of min eigenvalue / max eigenvalue.
fn worst_eigen_ratio(cov: &dyn Covariance, support: Support, params: &PositiveDefiniteParams, seed: u64) -> Result<f64> {
    let mut worst = f64::INFINITY;
    for g in 0..params.n_grids {
        let mut rng = rng_from(derive_seed(seed, &[&cov.id(), &g.to_string()]));
        let grid: Vec<f64> = (0..params.grid_size)
            .map(|_| {
                let r = params.range;
                match support {
                    Support::Line => rng.random_range(-r..r),
                    Support::Punctured => {
                        let x: f64 = rng.random_range(0.01..r);
                        if rng.random::<bool>() {
                            x
                        } else {
                            -x
                        }
                    }
                    Support::Positive => rng.random_range(0.01..r),
                }
            })
            .collect();
        let k = covariance_matrix(&grid, cov)?;
        let e = SymmetricEigen::new(k).eigenvalues;
        let (lo, hi) = (e.min(), e.max());
        worst = worst.min(lo / hi.abs().max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

pub fn kernel_positive_definite(ctx: &Context, params: &PositiveDefiniteParams) -> Result<CheckVerdict> {
    let seed = ctx.check_seed(KERNEL_POSITIVE_DEFINITE);
    let mut v = CheckVerdict::new(KERNEL_POSITIVE_DEFINITE, params, seed);
    let (b, p) = (params.beta, params.p);
    let bm = Family::Levy(Arc::new(LevyKernels::new(LevyExponentSpec::brownian())?));
    let stable = Family::Levy(Arc::new(LevyKernels::new(LevyExponentSpec::stable(params.stable_alpha, 1.0)?)?));
    let hw = params.diffusion_half_width;
    let dbm = Family::Diffusion(Arc::new(DiffusionKernels::new(DiffusionSpec::bm(-hw, hw))?));
    let dou = Family::Diffusion(Arc::new(DiffusionKernels::new(DiffusionSpec::with(
        Coefficients::Ou { theta: params.ou_theta },
        -hw,
        hw,
    ))?));
    let mut list: Vec<(String, Family, CovarianceKind, Support)> = Vec::new();
    for (name, fam) in [("brownian", &bm), (&format!("stable{}", params.stable_alpha), &stable)] {
        list.push((format!("{name}/u_beta"), fam.clone(), CovarianceKind::UBeta { beta: b }, Support::Line));
        list.push((format!("{name}/v_beta"), fam.clone(), CovarianceKind::VBeta { beta: b }, Support::Punctured));
        list.push((format!("{name}/frak_u0"), fam.clone(), CovarianceKind::FrakU0, Support::Punctured));
    }
    for (name, fam) in [("diffusion_bm", &dbm), ("diffusion_ou", &dou)] {
        list.push((format!("{name}/u_bar_beta"), fam.clone(), CovarianceKind::UBarBeta { beta: b }, Support::Line));
        list.push((format!("{name}/v_bar_beta"), fam.clone(), CovarianceKind::VBarBeta { beta: b }, Support::Positive));
        list.push((format!("{name}/scale_min"), fam.clone(), CovarianceKind::ScaleMin, Support::Positive));
        list.push((format!("{name}/difference"), fam.clone(), CovarianceKind::DifferenceKernel { p }, Support::Positive));
    }
    let tol = ctx.thresholds.eig_rel_tol;
    for (name, fam, kind, support) in list {
        let cov = KernelCovariance::new(kind, fam)?;
        let r = worst_eigen_ratio(&cov, support, params, seed)?;
        let t = DistributionalTest::new(name, TestKind::Tolerance, r, -tol, r >= -tol)
            .with_sizes(vec![params.n_grids, params.grid_size]);
        v.tests.push(t);
    }
    Ok(v.finalize(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalarParams {
    /// (β, p) pairs for the row-integral and killing checks.
    pub pairs: Vec<(f64, f64)>,
    pub x: f64,
    /// Row integrals run over [−half_width, half_width].
    pub half_width: f64,
    pub n_measures: usize,
    pub atoms_per_measure: usize,
    pub y_grid: Vec<f64>,
}

impl Default for ScalarParams {
    fn default() -> Self {
        ScalarParams {
            pairs: vec![(1.0, 1.0), (0.5, 2.0), (2.0, 0.5)],
            x: 0.3,
            half_width: 30.0,
            n_measures: 5,
            atoms_per_measure: 3,
            y_grid: linspace(-3.0, 3.0, 61),
        }
    }
}

pub fn scalar_identities(ctx: &Context, params: &ScalarParams) -> Result<CheckVerdict> {
    let seed = ctx.check_seed(SCALAR_IDENTITIES);
    let mut v = CheckVerdict::new(SCALAR_IDENTITIES, params, seed);
    let bm = Arc::new(LevyKernels::new(LevyExponentSpec::brownian())?);
    let case1 = |beta: f64| BaseProcess::new(CaseId::Case1, Family::Levy(bm.clone()), beta).map(Arc::new);

    let mut worst_row: f64 = 0.0;
    let mut worst_kill: f64 = 0.0;
    for &(beta, p) in &params.pairs {
        let base = case1(beta)?;
        let k = RebirthKernel::new(base.clone(), Measure::dirac(0.0), p)?;
        let row = k.row_integral(params.x, -params.half_width, params.half_width)?;
        worst_row = worst_row.max(rel_err(row, 1.0 / p));
        let kl = killing_laplace(&base, p, params.x)?;
        worst_kill = worst_kill.max((kl - beta / (beta + p)).abs());
    }
    v.tests.push(DistributionalTest::within("row_integral_w_p", TestKind::Tolerance, worst_row, ctx.thresholds.scalar_rel_tol));

    // f(y) ≤ u^p(y,y) for random atomic probability measures.
    let hw = 4.0;
    let ou = Arc::new(DiffusionKernels::new(DiffusionSpec::with(Coefficients::Ou { theta: 1.0 }, -hw, hw))?);
    let bases = [
        ("case1", case1(1.0)?),
        ("case2", Arc::new(BaseProcess::new(CaseId::Case2, Family::Levy(bm.clone()), 1.0)?)),
        ("case4_ou", Arc::new(BaseProcess::new(CaseId::Case4, Family::Diffusion(ou), 1.0)?)),
    ];
    let p = 1.0;
    let mut worst_margin = f64::NEG_INFINITY;
    let mut count = 0;
    for (name, base) in &bases {
        for m in 0..params.n_measures {
            let mut rng = rng_from(derive_seed(seed, &["measure", name, &m.to_string()]));
            let mut atoms: Vec<(f64, f64)> = (0..params.atoms_per_measure)
                .map(|_| {
                    let mut x: f64 = rng.random_range(-2.0..2.0);
                    if x.abs() < 0.05 {
                        x += 0.1;
                    }
                    (x, rng.random_range(0.1..1.0))
                })
                .collect();
            let total: f64 = atoms.iter().map(|a| a.1).sum();
            for a in &mut atoms {
                a.1 /= total;
            }
            let k = RebirthKernel::new(base.clone(), Measure::from_atoms(atoms), p)?;
            for &y in params.y_grid.iter().filter(|&&y| base.in_state_space(y)) {
                let f = k.f(y)?;
                let d = base.potential(p, y, y)?;
                worst_margin = worst_margin.max((f - d) / d);
                count += 1;
            }
        }
    }
    let margin_tol = 1e-10;
    v.tests.push(
        DistributionalTest::new("f_below_diagonal", TestKind::Tolerance, worst_margin, margin_tol, worst_margin <= margin_tol)
            .with_sizes(vec![count]),
    );
    v.tests.push(DistributionalTest::within("killing_laplace", TestKind::Tolerance, worst_kill, ctx.thresholds.laplace_abs_tol));
    Ok(v.finalize(false))
}
