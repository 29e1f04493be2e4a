//! Potential densities and increment variances of symmetric Lévy processes,
//! computed from the characteristic exponent by oscillatory quadrature.

use std::collections::HashMap;
use std::f64::consts::PI;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain, LabError, Result};
use crate::quadrature::{adaptive, cos_tail};

/// Symmetric characteristic exponent ψ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LevyExponentSpec {
    /// ψ(λ) = scale·|λ|^alpha.
    Stable { alpha: f64, scale: f64 },
    /// Log-log interpolated table with power-law extrapolation.
    Tabulated { lambda_grid: Vec<f64>, psi_values: Vec<f64>, rv_index: f64 },
}

impl LevyExponentSpec {
    /// Standard Brownian motion, ψ(λ) = λ²/2.
    pub fn brownian() -> Self {
        LevyExponentSpec::Stable { alpha: 2.0, scale: 0.5 }
    }

    pub fn stable(alpha: f64, scale: f64) -> Result<Self> {
        let s = LevyExponentSpec::Stable { alpha, scale };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LevyExponentSpec::Stable { alpha, scale } => {
                if !(*alpha > 1.0 && *alpha <= 2.0) {
                    return domain(format!("stable index {alpha} outside (1,2]"));
                }
                if !(*scale > 0.0 && scale.is_finite()) {
                    return domain(format!("stable scale {scale} must be positive"));
                }
            }
            LevyExponentSpec::Tabulated { lambda_grid, psi_values, rv_index } => {
                if lambda_grid.len() < 2 || lambda_grid.len() != psi_values.len() {
                    return domain("tabulated exponent needs at least two (lambda, psi) pairs of equal length");
                }
                if lambda_grid[0] <= 0.0 || lambda_grid.windows(2).any(|w| w[1] <= w[0]) {
                    return domain("tabulated lambda grid must be positive and strictly increasing");
                }
                if psi_values.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                    return domain("tabulated psi values must be strictly positive");
                }
                if !(*rv_index > 1.0 && *rv_index <= 2.0) {
                    return domain(format!("rv_index {rv_index} outside (1,2]"));
                }
                let s0 = self.head_slope();
                if !(s0 > 0.0 && s0 < 3.0) {
                    return domain(format!(
                        "first table segment has log-log slope {s0}; need (0,3) for integrability at the origin"
                    ));
                }
            }
        }
        Ok(())
    }

    fn head_slope(&self) -> f64 {
        match self {
            LevyExponentSpec::Stable { alpha, .. } => *alpha,
            LevyExponentSpec::Tabulated { lambda_grid: g, psi_values: v, .. } => {
                (v[1] / v[0]).ln() / (g[1] / g[0]).ln()
            }
        }
    }

    pub fn psi(&self, lambda: f64) -> f64 {
        let l = lambda.abs();
        if l == 0.0 {
            return 0.0;
        }
        match self {
            LevyExponentSpec::Stable { alpha, scale } => {
                if *alpha == 2.0 {
                    scale * l * l
                } else {
                    scale * l.powf(*alpha)
                }
            }
            LevyExponentSpec::Tabulated { lambda_grid: g, psi_values: v, rv_index } => {
                let n = g.len();
                if l <= g[0] {
                    v[0] * (l / g[0]).powf(self.head_slope())
                } else if l >= g[n - 1] {
                    v[n - 1] * (l / g[n - 1]).powf(*rv_index)
                } else {
                    let i = g.partition_point(|&t| t <= l) - 1;
                    let t = (l / g[i]).ln() / (g[i + 1] / g[i]).ln();
                    (v[i].ln() * (1.0 - t) + v[i + 1].ln() * t).exp()
                }
            }
        }
    }

    /// Index of regular variation at infinity.
    pub fn rv_index(&self) -> f64 {
        match self {
            LevyExponentSpec::Stable { alpha, .. } => *alpha,
            LevyExponentSpec::Tabulated { rv_index, .. } => *rv_index,
        }
    }

    /// For ψ = c·λ², the variance rate 2c of the Gaussian increments.
    pub fn brownian_variance_rate(&self) -> Option<f64> {
        match self {
            LevyExponentSpec::Stable { alpha, scale } if *alpha == 2.0 => Some(2.0 * scale),
            _ => None,
        }
    }

    /// Where ψ(λ) = C·λ^r holds exactly: (start, C, r).
    fn power_region(&self) -> (f64, f64, f64) {
        match self {
            LevyExponentSpec::Stable { alpha, scale } => (0.0, *scale, *alpha),
            LevyExponentSpec::Tabulated { lambda_grid: g, psi_values: v, rv_index } => {
                let n = g.len();
                (g[n - 1], v[n - 1] / g[n - 1].powf(*rv_index), *rv_index)
            }
        }
    }

    pub fn spec_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// C_r = (4/π)∫₀^∞ sin²(s/2)/s^r ds.
pub fn c_r(r: f64) -> Result<f64> {
    if !(r > 1.0 && r <= 2.0) {
        return domain(format!("C_r requires r in (1,2], got {r}"));
    }
    let g = |s: f64| s.powf(-r);
    let tail = PowerTail { start: 0.0, coef: 1.0, index: r };
    let out = one_minus_cos(&g, &tail, 0.0, 1.0, 1e-13, 6000)?;
    Ok(2.0 / PI * out.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevyKernelCase {
    UBeta,
    VBeta,
    FrakU0,
    Sigma2Beta,
    Sigma2Zero,
    Phi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadDiagnostics {
    /// Start of the region treated analytically (power-law tail).
    pub cutoff: f64,
    pub n_panels: usize,
    pub rel_tol: f64,
    pub error_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelEval {
    pub case_id: LevyKernelCase,
    pub beta: f64,
    pub value: f64,
    pub quadrature: QuadDiagnostics,
}

#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub rel_tol: f64,
    pub max_terms: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions { rel_tol: 1e-11, max_terms: 6000 }
    }
}

#[derive(Debug, Clone, Copy)]
struct Integral {
    value: f64,
    error: f64,
    panels: usize,
    cutoff: f64,
}

/// Region λ ≥ start where ψ(λ) = coef·λ^index exactly.
struct PowerTail {
    start: f64,
    coef: f64,
    index: f64,
}

impl PowerTail {
    /// Point beyond which β/ψ ≤ 1/2, so the series below converges fast.
    fn series_start(&self, beta: f64, lo: f64) -> f64 {
        let need = if beta > 0.0 { (2.0 * beta / self.coef).powf(1.0 / self.index) } else { 0.0 };
        self.start.max(lo).max(need)
    }

    /// ∫_Λ^∞ dλ/(β + Cλ^r) by the geometric expansion in β/(CΛ^r).
    fn integral(&self, beta: f64, from: f64) -> f64 {
        let r = self.index;
        let base = from / (self.coef * from.powf(r));
        let q = beta / (self.coef * from.powf(r));
        let mut sum = 0.0;
        let mut qk = 1.0;
        for k in 0..200 {
            let term = qk / (r * (k as f64 + 1.0) - 1.0);
            sum += term;
            if term.abs() < 1e-17 * sum.abs() {
                break;
            }
            qk *= -q;
        }
        base * sum
    }
}

/// ∫_lo^∞ g, with g = 1/(β+ψ) agreeing with the power tail eventually.
fn plain_tail<G: Fn(f64) -> f64>(g: &G, tail: &PowerTail, beta: f64, lo: f64, abs_tol: f64) -> Result<Integral> {
    let cut = tail.series_start(beta, lo);
    let mut value = 0.0;
    let mut error = 0.0;
    let mut panels = 0;
    let mut a = lo;
    while a < cut {
        let b = if a <= 0.0 { 1.0f64.min(cut) } else { (2.0 * a).min(cut) };
        let r = adaptive(g, a, b, abs_tol * 1e-2, 1e-13, 400);
        value += r.value;
        error += r.error;
        panels += r.panels;
        a = b;
    }
    value += tail.integral(beta, cut);
    Ok(Integral { value, error, panels, cutoff: cut })
}

/// ∫_0^∞ (1 − cos λx) g(λ) dλ.
fn one_minus_cos<G: Fn(f64) -> f64>(
    g: &G,
    tail: &PowerTail,
    beta: f64,
    x: f64,
    rel_tol: f64,
    max_terms: usize,
) -> Result<Integral> {
    let x = x.abs();
    if x == 0.0 {
        return Ok(Integral { value: 0.0, error: 0.0, panels: 0, cutoff: 0.0 });
    }
    let a = PI / (2.0 * x);
    let head_f = |l: f64| {
        let s = (0.5 * l * x).sin();
        2.0 * s * s * g(l)
    };
    // Rough scale for absolute tolerances.
    let head0 = adaptive(&head_f, 0.0, a, 0.0, 1e-6, 50).value.abs();
    let abs_tol = rel_tol * head0.max(f64::MIN_POSITIVE);
    let head = adaptive(&head_f, 0.0, a, abs_tol * 1e-2, rel_tol * 1e-2, 2000);
    let flat = plain_tail(g, tail, beta, a, abs_tol)?;
    let osc = cos_tail(g, x, a, abs_tol * 0.5, max_terms);
    let value = head.value + flat.value - osc.value;
    let error = head.error + flat.error + osc.error;
    if !(error <= rel_tol * value.abs() * 10.0 + abs_tol) {
        return Err(LabError::Quadrature {
            what: format!("(1-cos)-integral at x={x}"),
            achieved: error / value.abs().max(f64::MIN_POSITIVE),
            tol: rel_tol,
        });
    }
    Ok(Integral { value, error, panels: head.panels + flat.panels + osc.panels, cutoff: flat.cutoff })
}

/// ∫_0^∞ cos(λx) g(λ) dλ.
fn cosine<G: Fn(f64) -> f64>(
    g: &G,
    tail: &PowerTail,
    beta: f64,
    x: f64,
    rel_tol: f64,
    max_terms: usize,
) -> Result<Integral> {
    let x = x.abs();
    let total = plain_tail(g, tail, beta, 0.0, 0.0)?;
    if x == 0.0 {
        return Ok(total);
    }
    let abs_tol = rel_tol * total.value.abs();
    let a = PI / (2.0 * x);
    let head = adaptive(&|l: f64| (l * x).cos() * g(l), 0.0, a, abs_tol * 1e-2, rel_tol * 1e-2, 2000);
    let osc = cos_tail(g, x, a, abs_tol * 0.5, max_terms);
    let value = head.value + osc.value;
    let error = head.error + osc.error;
    if !(error <= abs_tol * 10.0) {
        return Err(LabError::Quadrature {
            what: format!("cosine integral at x={x}"),
            achieved: error / total.value.abs(),
            tol: rel_tol,
        });
    }
    Ok(Integral { value, error, panels: head.panels + osc.panels, cutoff: total.cutoff })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Cos,
    OneMinusCos,
}

type CacheKey = (Kind, u64, i64);

const CACHE_LIMIT: usize = 1 << 20;

/// Kernel evaluator bound to one exponent; results are memoized.
pub struct LevyKernels {
    spec: LevyExponentSpec,
    opts: QuadOptions,
    hash: String,
    cache: RwLock<HashMap<CacheKey, Integral>>,
}

impl std::fmt::Debug for LevyKernels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LevyKernels").field("spec", &self.spec).finish()
    }
}

fn quantize(x: f64) -> i64 {
    (x.abs() * (1u64 << 42) as f64).round() as i64
}

impl LevyKernels {
    pub fn new(spec: LevyExponentSpec) -> Result<Self> {
        Self::with_options(spec, QuadOptions::default())
    }

    pub fn with_options(spec: LevyExponentSpec, opts: QuadOptions) -> Result<Self> {
        spec.validate()?;
        let hash = spec.spec_hash();
        Ok(LevyKernels { spec, opts, hash, cache: RwLock::new(HashMap::new()) })
    }

    pub fn spec(&self) -> &LevyExponentSpec {
        &self.spec
    }

    pub fn spec_hash(&self) -> &str {
        &self.hash
    }

    fn integral(&self, kind: Kind, beta: f64, x: f64) -> Result<Integral> {
        let key = (kind, beta.to_bits(), quantize(x));
        if let Some(v) = self.cache.read().get(&key) {
            return Ok(*v);
        }
        let (start, coef, index) = self.spec.power_region();
        let tail = PowerTail { start, coef, index };
        let spec = &self.spec;
        let g = |l: f64| 1.0 / (beta + spec.psi(l));
        let out = match kind {
            Kind::Cos => cosine(&g, &tail, beta, x, self.opts.rel_tol, self.opts.max_terms)?,
            Kind::OneMinusCos => one_minus_cos(&g, &tail, beta, x, self.opts.rel_tol, self.opts.max_terms)?,
        };
        let mut cache = self.cache.write();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(key, out);
        Ok(out)
    }

    /// u^β(x) = (1/2π)∫cos(λx)/(β+ψ(λ)) dλ.
    pub fn u_beta(&self, beta: f64, x: f64) -> Result<f64> {
        Ok(self.u_beta_eval(beta, x)?.value)
    }

    fn u_beta_eval(&self, beta: f64, x: f64) -> Result<KernelEval> {
        if !(beta > 0.0) {
            return domain(format!("u_beta needs beta > 0, got {beta}"));
        }
        let i = self.integral(Kind::Cos, beta, x)?;
        Ok(self.eval(LevyKernelCase::UBeta, beta, i.value / PI, &i))
    }

    /// φ(x) = (1/2π)∫(1 − cos λx)/ψ(λ) dλ.
    pub fn phi0(&self, x: f64) -> Result<f64> {
        Ok(self.integral(Kind::OneMinusCos, 0.0, x)?.value / PI)
    }

    /// 𝔲⁰(x,y) = φ(x) + φ(y) − φ(x − y) on R¹∖{0}.
    pub fn frak_u0(&self, x: f64, y: f64) -> Result<f64> {
        if x == 0.0 || y == 0.0 {
            return domain("frak_u0 is defined on the punctured line; got a zero argument");
        }
        Ok(self.phi0(x)? + self.phi0(y)? - self.phi0(x - y)?)
    }

    /// (σ^β)²(x) = (1/π)∫(1 − cos λx)/(β+ψ(λ)) dλ.
    pub fn sigma2(&self, beta: f64, x: f64) -> Result<f64> {
        if !(beta >= 0.0) {
            return domain(format!("sigma2 needs beta >= 0, got {beta}"));
        }
        Ok(2.0 * self.integral(Kind::OneMinusCos, beta, x)?.value / PI)
    }

    /// Small-distance asymptote C_r/(x ψ(1/x)) of σ².
    pub fn sigma2_asymptotic(&self, x: f64) -> Result<f64> {
        let x = x.abs();
        Ok(c_r(self.spec.rv_index())? / (x * self.spec.psi(1.0 / x)))
    }

    /// v^β(x,y) = u^β(x−y) − u^β(x)u^β(y)/u^β(0).
    pub fn v_beta(&self, beta: f64, x: f64, y: f64) -> Result<f64> {
        let u0 = self.u_beta(beta, 0.0)?;
        Ok(self.u_beta(beta, x - y)? - self.u_beta(beta, x)? * self.u_beta(beta, y)? / u0)
    }

    /// Evaluate any kernel with quadrature diagnostics. One-argument kernels ignore `y`.
    pub fn evaluate(&self, case: LevyKernelCase, beta: f64, x: f64, y: f64) -> Result<KernelEval> {
        match case {
            LevyKernelCase::UBeta => self.u_beta_eval(beta, x),
            LevyKernelCase::VBeta => {
                let v = self.v_beta(beta, x, y)?;
                let i = self.integral(Kind::Cos, beta, x - y)?;
                Ok(self.eval(case, beta, v, &i))
            }
            LevyKernelCase::FrakU0 => {
                let v = self.frak_u0(x, y)?;
                let i = self.integral(Kind::OneMinusCos, 0.0, x - y)?;
                Ok(self.eval(case, 0.0, v, &i))
            }
            LevyKernelCase::Sigma2Beta | LevyKernelCase::Sigma2Zero => {
                let b = if case == LevyKernelCase::Sigma2Zero { 0.0 } else { beta };
                let v = self.sigma2(b, x)?;
                let i = self.integral(Kind::OneMinusCos, b, x)?;
                Ok(self.eval(case, b, v, &i))
            }
            LevyKernelCase::Phi => {
                let i = self.integral(Kind::OneMinusCos, 0.0, x)?;
                Ok(self.eval(case, 0.0, i.value / PI, &i))
            }
        }
    }

    fn eval(&self, case_id: LevyKernelCase, beta: f64, value: f64, i: &Integral) -> KernelEval {
        KernelEval {
            case_id,
            beta,
            value,
            quadrature: QuadDiagnostics {
                cutoff: i.cutoff,
                n_panels: i.panels,
                rel_tol: self.opts.rel_tol,
                error_estimate: i.error,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bm() -> LevyKernels {
        LevyKernels::new(LevyExponentSpec::brownian()).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn u_beta_brownian_examples() {
        let k = bm();
        assert!(rel(k.u_beta(1.0, 0.0).unwrap(), 1.0 / 2f64.sqrt()) < 1e-9);
        assert!(rel(k.u_beta(2.0, 1.0).unwrap(), (-2.0f64).exp() / 2.0) < 1e-9);
        assert_eq!(k.u_beta(1.0, 0.7).unwrap(), k.u_beta(1.0, -0.7).unwrap());
    }

    #[test]
    fn phi_and_sigma_brownian() {
        let k = bm();
        assert!(rel(k.phi0(0.5).unwrap(), 0.5) < 1e-9);
        assert_eq!(k.phi0(0.0).unwrap(), 0.0);
        assert!(rel(k.sigma2(0.0, 0.25).unwrap(), 0.5) < 1e-9);
        assert!(rel(k.frak_u0(1.0, 2.0).unwrap(), 2.0) < 1e-9);
    }

    #[test]
    fn v_beta_closed_form() {
        let k = bm();
        let want = (1.0 - (-2.0 * 2f64.sqrt()).exp()) / 2f64.sqrt();
        assert!(rel(k.v_beta(1.0, 1.0, 1.0).unwrap(), want) < 1e-9);
        assert!(k.v_beta(1.0, 1.0, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn c_r_closed_forms() {
        assert!((c_r(2.0).unwrap() - 1.0).abs() < 1e-9);
        assert!(c_r(1.0).is_err());
    }

    #[test]
    fn domain_errors() {
        let k = bm();
        assert!(matches!(k.u_beta(0.0, 1.0), Err(LabError::Domain(_))));
        assert!(matches!(k.frak_u0(0.0, 1.0), Err(LabError::Domain(_))));
        assert!(LevyExponentSpec::stable(1.0, 1.0).is_err());
    }

    #[test]
    fn tabulated_matches_stable_when_exact() {
        let grid: Vec<f64> = (0..40).map(|i| 0.01 * 1.4f64.powi(i)).collect();
        let vals: Vec<f64> = grid.iter().map(|l| l.powf(1.5)).collect();
        let tab = LevyKernels::new(LevyExponentSpec::Tabulated {
            lambda_grid: grid,
            psi_values: vals,
            rv_index: 1.5,
        })
        .unwrap();
        let st = LevyKernels::new(LevyExponentSpec::stable(1.5, 1.0).unwrap()).unwrap();
        for x in [0.1, 0.7, 2.0] {
            assert!(rel(tab.u_beta(1.0, x).unwrap(), st.u_beta(1.0, x).unwrap()) < 1e-7);
            assert!(rel(tab.phi0(x).unwrap(), st.phi0(x).unwrap()) < 1e-7);
        }
    }
}
