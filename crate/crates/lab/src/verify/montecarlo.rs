//! Monte Carlo normalization checks and the exact decomposition/shift checks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{linspace, replica_sim, resolve_method, CheckVerdict, Context, DistributionalTest, Estimator, TestKind};
use super::{DECOMPOSITION_EXACTNESS, EQ_2_2_NORMALIZATION, EQ_6AZ_PARTIAL_NORMALIZATION, EQ_INT3_NORMALIZATION};
use crate::error::{domain, Result};
use crate::measure::Measure;
use crate::path_engine::{
    estimate_local_time, laplace_functional, Fixed, LocalTimeAccumulator, LocalTimeEstimate, LocalTimeMethod,
    LocalTimeRequest, Normalization, PathBundle,
};
use crate::process::BaseProcess;
use crate::quadrature::adaptive;
use crate::rebirth_kernels::{u_tilde0_partial, RebirthKernel, RebirthSpec};
use crate::rng::{derive_seed, rng_from, stream_seed};
use crate::stats::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    /// E^x L^y_∞ = u(x,y) for one killed path.
    Base,
    /// E^x ∫e^{−ps}dL̃^y = w^p(x,y) under full rebirth from `measure`.
    Rebirth,
    /// E^x L̃^y_∞ (on S) = ũ⁰(x,y) under partial rebirth with `measure` = ν.
    Partial,
}

impl NormalizationKind {
    pub fn check_id(self) -> &'static str {
        match self {
            NormalizationKind::Base => EQ_2_2_NORMALIZATION,
            NormalizationKind::Rebirth => EQ_INT3_NORMALIZATION,
            NormalizationKind::Partial => EQ_6AZ_PARTIAL_NORMALIZATION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationParams {
    pub x: f64,
    pub y: f64,
    pub n: usize,
    pub dt: f64,
    pub t_max: f64,
    pub epsilon: f64,
    pub estimator: Estimator,
    /// Discount rate (rebirth kind only).
    pub p: f64,
    /// μ for full rebirth, ν for partial rebirth.
    pub measure: Measure,
    /// Factor applied to the local time in the negative control.
    pub control_scale: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self::for_kind(NormalizationKind::Base)
    }
}

impl NormalizationParams {
    pub fn for_kind(kind: NormalizationKind) -> Self {
        match kind {
            NormalizationKind::Base => NormalizationParams {
                x: 0.0,
                y: 0.0,
                n: 20_000,
                dt: 1e-4,
                t_max: 50.0,
                epsilon: 0.02,
                estimator: Estimator::Occupation,
                p: 1.0,
                measure: Measure::dirac(0.0),
                control_scale: 0.5,
            },
            NormalizationKind::Rebirth => NormalizationParams {
                dt: 1e-3,
                t_max: 16.0,
                epsilon: 0.05,
                estimator: Estimator::Auto,
                ..Self::for_kind(NormalizationKind::Base)
            },
            NormalizationKind::Partial => NormalizationParams {
                t_max: 200.0,
                measure: Measure::weighted_atom(1.0, 0.5),
                ..Self::for_kind(NormalizationKind::Rebirth)
            },
        }
    }
}

/// Expected value of the box estimator: the target averaged over [y−ε, y+ε] against m.
fn smoothed_target(base: &BaseProcess, target: &dyn Fn(f64) -> Result<f64>, x: f64, y: f64, eps: f64) -> Result<f64> {
    let err = std::cell::RefCell::new(None);
    let g = |z: f64| {
        if !base.in_state_space(z) {
            return 0.0;
        }
        match target(z).and_then(|t| Ok(t * base.reference_density(z)?)) {
            Ok(v) => v,
            Err(e) => {
                err.borrow_mut().get_or_insert(e);
                0.0
            }
        }
    };
    let (lo, hi) = (y - eps, y + eps);
    let mut breaks = vec![lo, hi];
    for b in [x, 0.0] {
        if b > lo && b < hi {
            breaks.push(b);
        }
    }
    breaks.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in breaks.windows(2) {
        total += adaptive(&g, w[0], w[1], 1e-13, 1e-10, 200).value;
    }
    if let Some(e) = err.into_inner() {
        return Err(e);
    }
    Ok(total / (2.0 * eps * base.reference_density(y)?))
}

/// Monte Carlo mean of the local-time functional against its kernel value.
pub fn check_normalizations(
    ctx: &Context,
    base: &Arc<BaseProcess>,
    kind: NormalizationKind,
    params: &NormalizationParams,
) -> Result<CheckVerdict> {
    let id = kind.check_id();
    let seed = ctx.check_seed(id);
    let mut v = CheckVerdict::new(id, params, seed);
    let (x, y) = (params.x, params.y);
    let method = resolve_method(base, params.estimator, params.epsilon);
    let rebirth = match kind {
        NormalizationKind::Base => None,
        NormalizationKind::Rebirth => Some(RebirthSpec::full(params.measure.clone())),
        NormalizationKind::Partial => Some(RebirthSpec::partial(params.measure.clone())),
    };
    let target_fn: Box<dyn Fn(f64) -> Result<f64>> = match kind {
        NormalizationKind::Base => Box::new(|z| base.potential(0.0, x, z)),
        NormalizationKind::Rebirth => {
            let k = RebirthKernel::new(base.clone(), params.measure.clone(), params.p)?;
            Box::new(move |z| k.w_p(x, z))
        }
        NormalizationKind::Partial => Box::new(|z| u_tilde0_partial(base, &params.measure, x, z)),
    };
    let target = target_fn(y)?;
    let discounts = if kind == NormalizationKind::Rebirth { vec![params.p] } else { Vec::new() };
    let norm = match kind {
        NormalizationKind::Partial => Normalization::Partial(base.case),
        _ => Normalization::Full(base.case),
    };

    let out = ctx.par_map(params.n, |i| -> Result<(f64, bool)> {
        let s = stream_seed(seed, i as u64);
        let sim = replica_sim(base, params.dt, params.t_max, params.epsilon, s)?;
        let req = LocalTimeRequest { y_grid: vec![y], t_marks: Vec::new(), method, discounts: discounts.clone() };
        let mut acc = LocalTimeAccumulator::new(base, req, sim.variance_rate(), s)?;
        let bundle = match &rebirth {
            None => sim.simulate_base_observed(x, false, &mut acc)?,
            Some(r) => sim.simulate_rebirth_observed(r, x, false, &mut acc)?,
        };
        let est = acc.finish(&bundle, norm);
        let val = match kind {
            NormalizationKind::Rebirth => laplace_functional(&est, params.p, 0)?.value,
            _ => est.final_values[0],
        };
        Ok((val, est.open_ended))
    })?;
    let vals: Vec<f64> = out.iter().map(|o| o.0).collect();
    let open = out.iter().filter(|o| o.1).count();
    let e = mean_se(&vals);
    let kind_t = if kind == NormalizationKind::Rebirth { TestKind::LaplaceMatch } else { TestKind::MeanMatch };
    let z = ctx.thresholds.z_max;
    v.tests.push(DistributionalTest::z_match("mean_vs_kernel", kind_t, e.mean, e.se, target, z, e.n).with_grid(&[y]));
    if e.se == 0.0 {
        v.notes.push("standard error is zero: degenerate sample".into());
    }
    let scaled: Vec<f64> = vals.iter().map(|v| v * params.control_scale).collect();
    let c = mean_se(&scaled);
    v.negative_controls.push(
        DistributionalTest::z_match(format!("local_time_scaled_by_{}", params.control_scale), kind_t, c.mean, c.se, target, z, c.n)
            .with_grid(&[y]),
    );
    if let LocalTimeMethod::Occupation { epsilon } = method {
        let sm = smoothed_target(base, target_fn.as_ref(), x, y, epsilon)?;
        v.notes.push(format!(
            "bandwidth bias: the box estimator has mean {sm:.6} against point target {target:.6} (difference {:.3e}, {:.2} SE)",
            sm - target,
            (sm - target) / e.se.max(f64::MIN_POSITIVE)
        ));
    }
    match kind {
        NormalizationKind::Rebirth => v.notes.push(format!(
            "horizon truncation: remaining discount e^(-p t_max) = {:.3e}",
            (-params.p * params.t_max).exp()
        )),
        _ if open > 0 => v.notes.push(format!("{open} of {} paths were still alive at t_max", params.n)),
        _ => {}
    }
    Ok(v.finalize(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionParams {
    pub x: f64,
    pub measure: Measure,
    pub n_bundles: usize,
    pub n_shift_bundles: usize,
    pub n_splits: usize,
    pub dt: f64,
    pub t_max: f64,
    pub epsilon: f64,
    pub y_grid: Vec<f64>,
    pub n_marks: usize,
}

impl Default for DecompositionParams {
    fn default() -> Self {
        DecompositionParams {
            x: 0.0,
            measure: Measure::dirac(0.0),
            n_bundles: 1000,
            n_shift_bundles: 100,
            n_splits: 5,
            dt: 1e-3,
            t_max: 5.0,
            epsilon: 0.05,
            y_grid: linspace(-1.0, 1.0, 9),
            n_marks: 10,
        }
    }
}

/// Largest |L̂_t − Σ_c L̂_t(cycle c)| over marks and levels, including the final value.
fn decomposition_gap(est: &LocalTimeEstimate) -> f64 {
    let mut worst: f64 = 0.0;
    for (j, row) in est.values.iter().enumerate() {
        for (i, tot) in row.iter().enumerate() {
            let parts: f64 = est.per_cycle_values.iter().map(|c| c[j][i]).sum();
            worst = worst.max((tot - parts).abs());
        }
    }
    for (i, tot) in est.final_values.iter().enumerate() {
        let parts: f64 = est.cycle_totals.iter().map(|c| c[i]).sum();
        worst = worst.max((tot - parts).abs());
    }
    worst
}

fn fixed_at(est: &LocalTimeEstimate, t: f64) -> Result<&[Fixed]> {
    match est.t_marks.iter().position(|&m| m == t) {
        Some(j) => Ok(&est.fixed_values[j]),
        None => domain(format!("mark {t} missing from estimate")),
    }
}

/// Entries where A_{s+t} ≠ A_s + A_t∘θ_s (exact fixed-point comparison), and the largest f64 gap.
fn shift_mismatches(
    base: &BaseProcess,
    bundle: &PathBundle,
    method: LocalTimeMethod,
    y_grid: &[f64],
    split: (usize, u64),
    shift_at: (usize, u64),
    offsets: &[f64],
) -> Result<(usize, f64)> {
    let s = bundle.node_time(split.0, split.1);
    let shifted = bundle.shifted(shift_at.0, shift_at.1)?;
    let mut marks = vec![s];
    marks.extend(offsets.iter().map(|t| s + t));
    let req = LocalTimeRequest { y_grid: y_grid.to_vec(), t_marks: marks, method, discounts: Vec::new() };
    let orig = estimate_local_time(base, bundle, req.clone(), Normalization::Full(base.case))?;
    let req_s = LocalTimeRequest { t_marks: offsets.to_vec(), ..req };
    let sh = estimate_local_time(base, &shifted, req_s, Normalization::Full(base.case))?;
    let a_s = fixed_at(&orig, s)?;
    let mut bad = 0;
    let mut gap: f64 = 0.0;
    let mut cmp = |lhs: &[Fixed], rhs: &[Fixed]| {
        for (i, l) in lhs.iter().enumerate() {
            let r = a_s[i] + rhs[i];
            if *l != r {
                bad += 1;
            }
            gap = gap.max((l.to_f64() - r.to_f64()).abs());
        }
    };
    for &t in offsets {
        cmp(fixed_at(&orig, s + t)?, fixed_at(&sh, t)?);
    }
    cmp(&orig.fixed_final, &sh.fixed_final);
    Ok((bad, gap))
}

/// Shift identity at `n_splits` random interior nodes, and the off-by-one-node
/// control: [(mismatches, max gap) for the identity, same for the control].
fn split_checks(
    base: &BaseProcess,
    b: &PathBundle,
    method: LocalTimeMethod,
    y_grid: &[f64],
    n_splits: usize,
    rng: &mut impl Rng,
) -> Result<[(usize, f64); 2]> {
    let eligible: Vec<usize> = (0..b.cycles.len()).filter(|&c| b.cycles[c].n_steps >= 3).collect();
    let mut acc = [(0, 0.0f64); 2];
    if eligible.is_empty() {
        return Ok(acc);
    }
    for _ in 0..n_splits {
        let pos = eligible[rng.random_range(0..eligible.len())];
        let k = rng.random_range(1..b.cycles[pos].n_steps - 1);
        let span = b.end_time() - b.node_time(pos, k);
        let offsets: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * span).collect();
        let good = shift_mismatches(base, b, method, y_grid, (pos, k), (pos, k), &offsets)?;
        let bad = shift_mismatches(base, b, method, y_grid, (pos, k), (pos, k + 1), &offsets)?;
        acc[0].0 += good.0;
        acc[0].1 = acc[0].1.max(good.1);
        acc[1].0 += bad.0;
        acc[1].1 = acc[1].1.max(bad.1);
    }
    Ok(acc)
}

pub fn decomposition_exactness(ctx: &Context, base: &Arc<BaseProcess>, params: &DecompositionParams) -> Result<CheckVerdict> {
    let seed = ctx.check_seed(DECOMPOSITION_EXACTNESS);
    let mut v = CheckVerdict::new(DECOMPOSITION_EXACTNESS, params, seed);
    let rebirth = RebirthSpec::full(params.measure.clone());
    let mut methods = vec![("occupation", LocalTimeMethod::Occupation { epsilon: params.epsilon })];
    if let LocalTimeMethod::Bridge = resolve_method(base, Estimator::Auto, params.epsilon) {
        methods.push(("bridge", LocalTimeMethod::Bridge));
    }
    let marks: Vec<f64> = (1..=params.n_marks).map(|j| params.t_max * j as f64 / (params.n_marks + 1) as f64).collect();
    let tol = ctx.thresholds.exact_tol;

    for &(name, method) in &methods {
        let gaps = ctx.par_map(params.n_bundles, |i| -> Result<f64> {
            let s = stream_seed(seed, i as u64);
            let sim = replica_sim(base, params.dt, params.t_max, params.epsilon, s)?;
            let req = LocalTimeRequest { y_grid: params.y_grid.clone(), t_marks: marks.clone(), method, discounts: Vec::new() };
            let mut acc = LocalTimeAccumulator::new(base, req, sim.variance_rate(), s)?;
            let b = sim.simulate_rebirth_observed(&rebirth, params.x, false, &mut acc)?;
            Ok(decomposition_gap(&acc.finish(&b, Normalization::Full(base.case))))
        })?;
        let worst = gaps.iter().cloned().fold(0.0, f64::max);
        v.tests.push(
            DistributionalTest::within(format!("decomposition_{name}"), TestKind::Exact, worst, tol)
                .with_sizes(vec![params.n_bundles])
                .with_grid(&params.y_grid),
        );
    }

    let shift_seed = derive_seed(seed, &["shift"]);
    for &(name, method) in &methods {
        let res = ctx.par_map(params.n_shift_bundles, |i| -> Result<[(usize, f64); 2]> {
            let s = stream_seed(shift_seed, i as u64);
            let sim = replica_sim(base, params.dt, params.t_max, params.epsilon, s)?;
            let b = sim.simulate_rebirth(&rebirth, params.x)?;
            let mut rng = rng_from(derive_seed(s, &["splits"]));
            split_checks(base, &b, method, &params.y_grid, params.n_splits, &mut rng)
        })?;
        let sizes = vec![params.n_shift_bundles, params.n_splits];
        for (j, list) in [&mut v.tests, &mut v.negative_controls].into_iter().enumerate() {
            let count: usize = res.iter().map(|r| r[j].0).sum();
            let gap = res.iter().map(|r| r[j].1).fold(0.0, f64::max);
            let label = if j == 0 { "shift" } else { "shift_off_by_one_node" };
            let mut t = DistributionalTest::new(format!("{label}_{name}"), TestKind::Exact, count as f64, 0.0, count == 0)
                .with_sizes(sizes.clone());
            t.estimate = Some(gap);
            list.push(t);
        }
    }
    Ok(v.finalize(false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayParams {
    pub y_grid: Vec<f64>,
    pub estimator: Estimator,
    pub epsilon: f64,
    pub n_splits: usize,
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams { y_grid: linspace(-1.0, 1.0, 9), estimator: Estimator::Occupation, epsilon: 0.05, n_splits: 5 }
    }
}

/// Re-run the local-time estimator and the decomposition/shift checks on a
/// stored bundle without resimulating.
pub fn replay_decomposition(
    ctx: &Context,
    base: &BaseProcess,
    bundle: &PathBundle,
    params: &ReplayParams,
) -> Result<(CheckVerdict, LocalTimeEstimate)> {
    if bundle.case != base.case {
        return domain(format!("bundle is case {}, process is case {}", bundle.case.index(), base.case.index()));
    }
    let method = resolve_method(base, params.estimator, params.epsilon);
    let mut v = CheckVerdict::new(DECOMPOSITION_EXACTNESS, params, bundle.seed);
    let req = LocalTimeRequest::new(params.y_grid.clone(), method);
    let est = estimate_local_time(base, bundle, req, Normalization::Full(base.case))?;
    v.tests.push(DistributionalTest::within("decomposition", TestKind::Exact, decomposition_gap(&est), ctx.thresholds.exact_tol));
    let mut rng = rng_from(derive_seed(bundle.seed, &["replay_splits"]));
    let r = split_checks(base, bundle, method, &params.y_grid, params.n_splits, &mut rng)?;
    for (j, list) in [&mut v.tests, &mut v.negative_controls].into_iter().enumerate() {
        let label = if j == 0 { "shift" } else { "shift_off_by_one_node" };
        let mut t = DistributionalTest::new(label, TestKind::Exact, r[j].0 as f64, 0.0, r[j].0 == 0);
        t.estimate = Some(r[j].1);
        list.push(t);
    }
    if r[0].0 == 0 && r[1].0 == 0 {
        v.notes.push("bundle too short for interior splits; shift identity not exercised".into());
    }
    Ok((v.finalize(false), est))
}
