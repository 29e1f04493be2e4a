//! Verification suites. Every check returns a [`CheckVerdict`] whose
//! statistics are a pure function of (parameters, master seed).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::path_engine::{LocalTimeMethod, SimConfig, Simulator};
use crate::process::BaseProcess;
use crate::rng::derive_seed;

mod identities;
mod kernels;
mod modulus;
mod montecarlo;

pub use identities::{
    check_combined_identity, check_conditional_independence, check_eisenbaum, CombinedParams,
    ConditionalIndependenceParams, EisenbaumParams,
};
pub use kernels::{
    kernel_golden_suite, kernel_positive_definite, scalar_identities, GoldenParams, PositiveDefiniteParams,
    ScalarParams,
};
pub use modulus::{
    joint_direction_ratios, local_ratio_series, localtime_modulus, spectral_precondition, thm31_local_modulus,
    thm36_uniform_modulus, uniform_ratio_series, LocalModulusParams, LocalTimeModulusParams, ModulusMode,
    ModulusReport, PreconditionReport, ScaleStat, UniformModulusParams, IncrementSampling,
};
pub use montecarlo::{
    check_normalizations, decomposition_exactness, replay_decomposition, DecompositionParams, NormalizationKind,
    NormalizationParams, ReplayParams,
};

pub const KERNEL_GOLDEN_SUITE: &str = "kernel_golden_suite";
pub const KERNEL_POSITIVE_DEFINITE: &str = "kernel_positive_definite";
pub const SCALAR_IDENTITIES: &str = "scalar_identities";
pub const EQ_2_2_NORMALIZATION: &str = "eq_2_2_normalization";
pub const EQ_INT3_NORMALIZATION: &str = "eq_int3_normalization";
pub const EQ_6AZ_PARTIAL_NORMALIZATION: &str = "eq_6az_partial_normalization";
pub const DECOMPOSITION_EXACTNESS: &str = "decomposition_exactness";
pub const EISENBAUM_ISOMORPHISM: &str = "eisenbaum_isomorphism";
pub const CONDITIONAL_INDEPENDENCE: &str = "conditional_independence";
pub const COMBINED_IDENTITY: &str = "combined_identity";
pub const THM36_UNIFORM_MODULUS: &str = "thm36_uniform_modulus";
pub const THM31_LOCAL_MODULUS: &str = "thm31_local_modulus";
pub const THM41_LOCALTIME_MODULUS: &str = "thm41_localtime_modulus";

/// Every check id with a one-line description.
pub const CHECKS: [(&str, &str); 13] = [
    (KERNEL_GOLDEN_SUITE, "Brownian kernels against closed forms"),
    (KERNEL_POSITIVE_DEFINITE, "minimum eigenvalue of every covariance on random grids"),
    (SCALAR_IDENTITIES, "row integrals of w^p, f <= u^p(y,y), killing Laplace transform"),
    (EQ_2_2_NORMALIZATION, "E L^y_inf = u(x,y) for a single killed path"),
    (EQ_INT3_NORMALIZATION, "E int e^{-ps} dL^y = w^p(x,y) for the rebirthed path"),
    (EQ_6AZ_PARTIAL_NORMALIZATION, "E L^y_inf on S = u~0(x,y) under partial rebirth"),
    (DECOMPOSITION_EXACTNESS, "per-cycle decomposition and shift identity of the local-time estimate"),
    (EISENBAUM_ISOMORPHISM, "local time plus shifted squared Gaussian vs tilted Gaussian law"),
    (CONDITIONAL_INDEPENDENCE, "per-cycle local times are conditionally independent"),
    (COMBINED_IDENTITY, "rebirthed local time plus chi-square vs tilted chi-square law"),
    (THM36_UNIFORM_MODULUS, "uniform modulus ratios of Gaussian and chi-square fields (band/trend)"),
    (THM31_LOCAL_MODULUS, "local modulus ratios at a point (band/trend, informational)"),
    (THM41_LOCALTIME_MODULUS, "uniform modulus ratio of the rebirthed local time (band)"),
];

pub fn is_known_check(id: &str) -> bool {
    CHECKS.iter().any(|(c, _)| *c == id)
}

/// Pass thresholds. These are configuration, never hard-coded in the checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Maximum |z| for mean-matching tests.
    pub z_max: f64,
    /// |corr| must not exceed corr_mult/√n.
    pub corr_mult: f64,
    /// Level of the permutation-calibrated KS test.
    pub ks_level: f64,
    pub n_permutations: usize,
    pub min_ess: f64,
    /// Minimum acceptance rate of conditioning events before a check is infeasible.
    pub min_acceptance: f64,
    pub exact_tol: f64,
    pub kernel_rel_tol: f64,
    pub scalar_rel_tol: f64,
    pub laplace_abs_tol: f64,
    pub eig_rel_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            z_max: 3.0,
            corr_mult: 3.0,
            ks_level: 0.01,
            n_permutations: 200,
            min_ess: 100.0,
            min_acceptance: 1e-3,
            exact_tol: 1e-12,
            kernel_rel_tol: 1e-6,
            scalar_rel_tol: 1e-4,
            laplace_abs_tol: 1e-6,
            eig_rel_tol: 1e-8,
        }
    }
}

/// What every check needs besides its own parameters.
#[derive(Debug, Clone)]
pub struct Context {
    pub master_seed: u64,
    /// Worker threads; results do not depend on it.
    pub workers: usize,
    pub thresholds: Thresholds,
}

impl Context {
    pub fn new(master_seed: u64) -> Self {
        Context { master_seed, workers: default_workers(), thresholds: Thresholds::default() }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// Seed of a check; no two checks share a stream.
    pub fn check_seed(&self, check: &str) -> u64 {
        derive_seed(self.master_seed, &[check])
    }

    /// Ordered parallel map over `0..n`.
    pub fn par_map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| LabError::Numerical(format!("worker pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(&f).collect())
    }
}

/// `REBIRTH_LAB_WORKERS` if set, else the available parallelism.
pub fn default_workers() -> usize {
    std::env::var("REBIRTH_LAB_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    TwoSampleKs,
    WeightedMeanMatch,
    LaplaceMatch,
    MeanMatch,
    Correlation,
    Exact,
    Tolerance,
    Band,
    Trend,
    Feasibility,
}

/// One sub-test with its statistic and the threshold it was judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionalTest {
    pub name: String,
    pub test_kind: TestKind,
    pub sample_sizes: Vec<usize>,
    pub statistic: f64,
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub grid: Vec<f64>,
    pub pass: bool,
}

impl DistributionalTest {
    pub fn new(name: impl Into<String>, kind: TestKind, statistic: f64, threshold: f64, pass: bool) -> Self {
        DistributionalTest {
            name: name.into(),
            test_kind: kind,
            sample_sizes: Vec::new(),
            statistic,
            threshold,
            z_score: None,
            p_value: None,
            estimate: None,
            target: None,
            se: None,
            grid: Vec::new(),
            pass,
        }
    }

    /// |statistic| ≤ threshold.
    pub fn within(name: impl Into<String>, kind: TestKind, statistic: f64, threshold: f64) -> Self {
        let pass = statistic.abs() <= threshold;
        Self::new(name, kind, statistic, threshold, pass)
    }

    /// z-test of an estimate against a target; SE = 0 is flagged as a failure.
    pub fn z_match(
        name: impl Into<String>,
        kind: TestKind,
        estimate: f64,
        se: f64,
        target: f64,
        z_max: f64,
        n: usize,
    ) -> Self {
        let z = if se > 0.0 { (estimate - target) / se } else { f64::INFINITY };
        let mut t = Self::new(name, kind, z, z_max, z.abs() <= z_max);
        t.z_score = Some(z);
        t.p_value = Some(two_sided_p(z));
        t.estimate = Some(estimate);
        t.target = Some(target);
        t.se = Some(se);
        t.sample_sizes = vec![n];
        t
    }

    pub fn with_grid(mut self, grid: &[f64]) -> Self {
        self.grid = grid.to_vec();
        self
    }

    pub fn with_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.sample_sizes = sizes;
        self
    }
}

/// Two-sided normal p-value.
pub fn two_sided_p(z: f64) -> f64 {
    if !z.is_finite() {
        return 0.0;
    }
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * n.cdf(-z.abs())).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Band/trend verdict not promoted to a hard check.
    Informational,
    Infeasible,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckVerdict {
    pub check: String,
    pub params: serde_json::Value,
    pub seed: u64,
    /// Headline statistic and threshold (those of the first sub-test).
    pub statistic: f64,
    pub threshold: f64,
    /// All sub-tests pass and every negative control fails.
    pub pass: bool,
    pub status: Status,
    pub tests: Vec<DistributionalTest>,
    /// Corrupted-input variants; each is expected to fail.
    pub negative_controls: Vec<DistributionalTest>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub modulus: Vec<ModulusReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub notes: Vec<String>,
}

impl CheckVerdict {
    pub fn new(check: &str, params: &impl Serialize, seed: u64) -> Self {
        CheckVerdict {
            check: check.to_string(),
            params: serde_json::to_value(params).unwrap_or(serde_json::Value::Null),
            seed,
            statistic: f64::NAN,
            threshold: f64::NAN,
            pass: false,
            status: Status::Fail,
            tests: Vec::new(),
            negative_controls: Vec::new(),
            modulus: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// Fill in the headline fields and the verdict.
    pub fn finalize(mut self, informational: bool) -> Self {
        if let Some(t) = self.tests.first() {
            self.statistic = t.statistic;
            self.threshold = t.threshold;
        }
        self.pass = !self.tests.is_empty()
            && self.tests.iter().all(|t| t.pass)
            && self.negative_controls.iter().all(|t| !t.pass);
        let infeasible = self.tests.iter().any(|t| t.test_kind == TestKind::Feasibility && !t.pass);
        self.status = if infeasible {
            Status::Infeasible
        } else if informational {
            Status::Informational
        } else if self.pass {
            Status::Pass
        } else {
            Status::Fail
        };
        self
    }

    /// Verdict for a check that could not run.
    pub fn error(check: &str, params: serde_json::Value, seed: u64, err: &LabError) -> Self {
        let mut v = CheckVerdict::new(check, &params, seed);
        v.status = match err {
            LabError::Infeasible(_) => Status::Infeasible,
            _ => Status::Error,
        };
        v.notes.push(err.to_string());
        v
    }

    /// Deterministic statistic fields only (no timings), as canonical JSON.
    pub fn statistics_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Local-time estimator selection for Monte Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Bridge local time for Brownian Lévy bases, else occupation.
    Auto,
    Occupation,
    Bridge,
}

pub(crate) fn resolve_method(base: &BaseProcess, est: Estimator, epsilon: f64) -> LocalTimeMethod {
    let brownian = base.levy().is_some_and(|k| k.spec().brownian_variance_rate().is_some());
    match est {
        Estimator::Bridge => LocalTimeMethod::Bridge,
        Estimator::Occupation => LocalTimeMethod::Occupation { epsilon },
        Estimator::Auto if brownian => LocalTimeMethod::Bridge,
        Estimator::Auto => LocalTimeMethod::Occupation { epsilon },
    }
}

/// Simulator for one replica. The bandwidth is raised to √dt when needed so
/// the configuration validates; bridge estimates do not use it.
pub(crate) fn replica_sim(base: &Arc<BaseProcess>, dt: f64, t_max: f64, epsilon: f64, seed: u64) -> Result<Simulator> {
    let eps = epsilon.max(dt.sqrt());
    Simulator::new(base.clone(), SimConfig::new(dt, t_max, eps, seed))
}

/// Collect `n` accepted draws from attempts 0, 1, 2, … processed in fixed-size
/// chunks, keeping attempt order so the result does not depend on scheduling.
pub(crate) fn accept_n<T, F>(ctx: &Context, n: usize, chunk: usize, max_attempts: usize, f: F) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(usize) -> Result<Option<T>> + Sync + Send,
{
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        if attempts >= max_attempts {
            return Err(LabError::Infeasible(format!(
                "only {} of {n} conditioned samples after {attempts} attempts",
                out.len()
            )));
        }
        let base = attempts;
        let got = ctx.par_map(chunk, |i| f(base + i))?;
        attempts += chunk;
        for g in got.into_iter().flatten() {
            if out.len() < n {
                out.push(g);
            }
        }
        if attempts >= chunk && (out.len() as f64) < ctx.thresholds.min_acceptance * attempts as f64 {
            return Err(LabError::Infeasible(format!(
                "conditioning event acceptance {:.2e} is below {:.1e}",
                out.len() as f64 / attempts as f64,
                ctx.thresholds.min_acceptance
            )));
        }
    }
    Ok((out, attempts))
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}
