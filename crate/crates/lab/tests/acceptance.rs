//! End-to-end acceptance run: one line per criterion, then a single verdict.
//!
//! Set REBIRTH_LAB_WORKERS to control parallelism; results do not depend on it.

use std::sync::Arc;
use std::time::Instant;

use rebirth_lab::levy_kernels::{LevyExponentSpec, LevyKernels};
use rebirth_lab::process::{BaseProcess, CaseId, Family};
use rebirth_lab::verify::*;
use rebirth_lab::Result;

const MASTER_SEED: u64 = 20_240_601;

fn brownian_case1() -> Arc<BaseProcess> {
    let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
    Arc::new(BaseProcess::new(CaseId::Case1, Family::Levy(k), 1.0).unwrap())
}

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
    budget: f64,
}

fn describe(v: &CheckVerdict) -> String {
    let failing: Vec<String> = v
        .tests
        .iter()
        .filter(|t| !t.pass)
        .map(|t| format!("{} ({:.4} vs {:.4})", t.name, t.statistic, t.threshold))
        .chain(v.negative_controls.iter().filter(|t| t.pass).map(|t| format!("control {} did not fail", t.name)))
        .collect();
    let moduli: Vec<String> = v
        .modulus
        .iter()
        .map(|r| format!("{} median {:.3} in [{}, {}]", r.name, r.band_median, r.band[0], r.band[1]))
        .collect();
    let mut s = format!("{:?}", v.status).to_lowercase();
    if !moduli.is_empty() {
        s += &format!("; {}", moduli.join("; "));
    }
    if !failing.is_empty() {
        s += &format!("; failing: {}", failing.join(", "));
    }
    s
}

fn timed(f: impl FnOnce() -> Result<Vec<CheckVerdict>>) -> (Vec<CheckVerdict>, f64) {
    let t0 = Instant::now();
    let v = f().expect("check ran");
    (v, t0.elapsed().as_secs_f64())
}

fn line(id: u32, name: &'static str, budget: f64, run: impl FnOnce() -> Result<Vec<CheckVerdict>>) -> Line {
    let (vs, secs) = timed(run);
    let pass = vs.iter().all(|v| v.pass) && secs < budget;
    let detail = vs.iter().map(|v| format!("{}: {}", v.check, describe(v))).collect::<Vec<_>>().join(" | ");
    Line { id, name, pass, detail, secs, budget }
}

/// Small-size versions of every check, for the worker-count comparison.
fn determinism_suite(ctx: &Context, base: &Arc<BaseProcess>) -> Result<Vec<String>> {
    let mut out = Vec::new();
    out.push(kernel_golden_suite(ctx, &GoldenParams::default())?);
    out.push(kernel_positive_definite(ctx, &PositiveDefiniteParams { n_grids: 2, grid_size: 20, ..Default::default() })?);
    out.push(scalar_identities(ctx, &ScalarParams::default())?);
    for kind in [NormalizationKind::Base, NormalizationKind::Rebirth, NormalizationKind::Partial] {
        let mut p = NormalizationParams::for_kind(kind);
        p.n = 300;
        p.dt = 1e-3;
        out.push(check_normalizations(ctx, base, kind, &p)?);
    }
    out.push(decomposition_exactness(ctx, base, &DecompositionParams { n_bundles: 20, n_shift_bundles: 5, ..Default::default() })?);
    out.push(check_eisenbaum(ctx, base, &EisenbaumParams { n: 2000, ..Default::default() })?);
    out.push(check_conditional_independence(ctx, base, &ConditionalIndependenceParams { n: 500, chunk: 256, ..Default::default() })?);
    out.push(check_combined_identity(ctx, base, &CombinedParams { n: 2000, ..Default::default() })?);
    out.push(thm36_uniform_modulus(ctx, &UniformModulusParams { replicas: 8, k_max: 12, ..Default::default() })?);
    out.push(thm31_local_modulus(ctx, &LocalModulusParams { replicas: 8, k_max: 14, trend_from: 9, ..Default::default() })?);
    out.push(localtime_modulus(ctx, base, &LocalTimeModulusParams { replicas: 4, h_k: 5, ..Default::default() })?);
    Ok(out.iter().map(|v| v.statistics_json()).collect())
}

#[test]
fn acceptance_criteria() {
    let base = brownian_case1();
    let ctx = Context::new(MASTER_SEED);
    let mut lines = Vec::new();

    lines.push(line(1, "kernel golden suite", 30.0, || Ok(vec![kernel_golden_suite(&ctx, &GoldenParams::default())?])));
    lines.push(line(2, "positive definiteness", 60.0, || {
        Ok(vec![kernel_positive_definite(&ctx, &PositiveDefiniteParams::default())?])
    }));
    lines.push(line(3, "scalar identities", 60.0, || Ok(vec![scalar_identities(&ctx, &ScalarParams::default())?])));
    lines.push(line(4, "local-time normalization", 300.0, || {
        let k = NormalizationKind::Base;
        Ok(vec![check_normalizations(&ctx, &base, k, &NormalizationParams::for_kind(k))?])
    }));
    lines.push(line(5, "rebirthed Laplace functional", 600.0, || {
        [NormalizationKind::Rebirth, NormalizationKind::Partial]
            .into_iter()
            .map(|k| check_normalizations(&ctx, &base, k, &NormalizationParams::for_kind(k)))
            .collect()
    }));
    lines.push(line(6, "decomposition exactness", 120.0, || {
        Ok(vec![decomposition_exactness(&ctx, &base, &DecompositionParams::default())?])
    }));
    lines.push(line(7, "distributional identities", 1200.0, || {
        Ok(vec![
            check_eisenbaum(&ctx, &base, &EisenbaumParams::default())?,
            check_conditional_independence(&ctx, &base, &ConditionalIndependenceParams::default())?,
            check_combined_identity(&ctx, &base, &CombinedParams::default())?,
        ])
    }));
    lines.push(line(8, "uniform modulus (band/trend)", 600.0, || {
        Ok(vec![thm36_uniform_modulus(&ctx, &UniformModulusParams::default())?])
    }));
    lines.push(line(9, "local modulus (band/trend, informational)", 600.0, || {
        Ok(vec![thm31_local_modulus(&ctx, &LocalModulusParams::default())?])
    }));
    lines.push(line(10, "local-time modulus (band)", 1800.0, || {
        Ok(vec![localtime_modulus(&ctx, &base, &LocalTimeModulusParams::default())?])
    }));
    lines.push(line(11, "determinism across worker counts", 600.0, || {
        let a = determinism_suite(&ctx.clone().with_workers(1), &base)?;
        let b = determinism_suite(&ctx.clone().with_workers(3), &base)?;
        let same = a == b;
        let mut v = CheckVerdict::new("determinism", &serde_json::json!({"workers": [1, 3], "checks": a.len()}), MASTER_SEED);
        v.tests.push(DistributionalTest::new("identical_statistics", TestKind::Exact, (!same) as u8 as f64, 0.0, same));
        Ok(vec![v.finalize(false)])
    }));

    println!();
    for l in &lines {
        println!(
            "criterion {:>2} {:<44} {} ({:.1}s / {:.0}s) {}",
            l.id,
            l.name,
            if l.pass { "PASS" } else { "FAIL" },
            l.secs,
            l.budget,
            l.detail
        );
    }
    let failed: Vec<u32> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    assert!(failed.is_empty(), "criteria failed: {failed:?}");
}
