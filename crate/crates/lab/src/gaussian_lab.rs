//! Gaussian fields on grids, generalized chi-square processes and modulus
//! targets.

use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::diffusion_kernels::{difference_kernel, frak_u0_diffusion, u_bar_beta, v_bar_beta};
use crate::error::{domain, LabError, Result};
use crate::process::Family;
use crate::rng::rng_from;

pub trait Covariance: Send + Sync {
    fn id(&self) -> String;
    fn cov(&self, x: f64, y: f64) -> Result<f64>;
}

/// The kernel families available as covariances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case")]
pub enum CovarianceKind {
    /// u^β(x − y) of a Lévy process.
    UBeta { beta: f64 },
    /// v^β(x, y), the Lévy kernel killed at 0.
    VBeta { beta: f64 },
    /// 𝔲⁰(x, y) = φ(x) + φ(y) − φ(x − y).
    FrakU0,
    /// ū^β(x, y) of a diffusion.
    UBarBeta { beta: f64 },
    /// v̄^β(x, y), the diffusion kernel killed at 0.
    VBarBeta { beta: f64 },
    /// s(x) ∧ s(y).
    ScaleMin,
    /// s(x) ∧ s(y) − v̄^p(x, y).
    DifferenceKernel { p: f64 },
}

impl CovarianceKind {
    pub fn is_levy(self) -> bool {
        matches!(self, CovarianceKind::UBeta { .. } | CovarianceKind::VBeta { .. } | CovarianceKind::FrakU0)
    }
}

#[derive(Debug, Clone)]
pub struct KernelCovariance {
    pub kind: CovarianceKind,
    pub family: Family,
}

impl KernelCovariance {
    pub fn new(kind: CovarianceKind, family: Family) -> Result<Self> {
        let ok = matches!((&family, kind.is_levy()), (Family::Levy(_), true) | (Family::Diffusion(_), false));
        if !ok {
            return domain(format!("covariance {kind:?} does not belong to the given process family"));
        }
        Ok(KernelCovariance { kind, family })
    }
}

impl Covariance for KernelCovariance {
    fn id(&self) -> String {
        let fam = match &self.family {
            Family::Levy(k) => format!("levy:{}", &k.spec_hash()[..12]),
            Family::Diffusion(_) => "diffusion".to_string(),
        };
        match self.kind {
            CovarianceKind::UBeta { beta } => format!("u_beta({beta})/{fam}"),
            CovarianceKind::VBeta { beta } => format!("v_beta({beta})/{fam}"),
            CovarianceKind::FrakU0 => format!("frak_u0/{fam}"),
            CovarianceKind::UBarBeta { beta } => format!("u_bar_beta({beta})/{fam}"),
            CovarianceKind::VBarBeta { beta } => format!("v_bar_beta({beta})/{fam}"),
            CovarianceKind::ScaleMin => format!("scale_min/{fam}"),
            CovarianceKind::DifferenceKernel { p } => format!("difference({p})/{fam}"),
        }
    }

    fn cov(&self, x: f64, y: f64) -> Result<f64> {
        match (&self.family, self.kind) {
            (Family::Levy(k), CovarianceKind::UBeta { beta }) => k.u_beta(beta, x - y),
            (Family::Levy(k), CovarianceKind::VBeta { beta }) => k.v_beta(beta, x, y),
            (Family::Levy(k), CovarianceKind::FrakU0) => k.frak_u0(x, y),
            (Family::Diffusion(d), CovarianceKind::UBarBeta { beta }) => u_bar_beta(&*d.factors(beta)?, x, y),
            (Family::Diffusion(d), CovarianceKind::VBarBeta { beta }) => v_bar_beta(&*d.factors(beta)?, x, y),
            (Family::Diffusion(d), CovarianceKind::ScaleMin) => frak_u0_diffusion(d.scale(), x, y),
            (Family::Diffusion(d), CovarianceKind::DifferenceKernel { p }) => {
                difference_kernel(&*d.factors(p)?, x, y)
            }
            _ => unreachable!("family checked at construction"),
        }
    }
}

/// A covariance given by a closure.
#[derive(Clone)]
pub struct FnCovariance {
    pub name: String,
    pub f: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl FnCovariance {
    pub fn new(name: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        FnCovariance { name: name.into(), f: Arc::new(f) }
    }
}

impl Covariance for FnCovariance {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn cov(&self, x: f64, y: f64) -> Result<f64> {
        Ok((self.f)(x, y))
    }
}

#[derive(Clone)]
pub struct GaussianFieldSpec {
    pub grid: Vec<f64>,
    pub covariance: Arc<dyn Covariance>,
    /// Diagonal regularization; `None` means 1e-12 × trace / n.
    pub jitter: Option<f64>,
}

impl GaussianFieldSpec {
    pub fn new(grid: Vec<f64>, covariance: Arc<dyn Covariance>) -> Self {
        GaussianFieldSpec { grid, covariance, jitter: None }
    }
}

/// Covariance matrix on a grid, symmetrized.
pub fn covariance_matrix(grid: &[f64], cov: &dyn Covariance) -> Result<DMatrix<f64>> {
    let n = grid.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| cov.cov(grid[i], grid[j])).collect::<Result<Vec<f64>>>())
        .collect::<Result<_>>()?;
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(LabError::Numerical(format!("covariance at ({}, {}) is {v}", grid[i], grid[j])));
            }
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Lower Cholesky factor of K + jitter·I.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub lower: DMatrix<f64>,
    pub jitter: f64,
}

/// Factorize with jitter escalating by decades up to 10³ × the base jitter.
pub fn factorize(k: &DMatrix<f64>, base_jitter: Option<f64>) -> Result<Factorization> {
    let n = k.nrows();
    let base = base_jitter.unwrap_or(1e-12 * k.trace() / n.max(1) as f64);
    if base < 0.0 {
        return domain(format!("jitter must be nonnegative, got {base}"));
    }
    for decade in 0..=3 {
        let jitter = base * 10f64.powi(decade);
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok(Factorization { lower: c.unpack(), jitter });
        }
    }
    let worst = SymmetricEigen::new(k.clone()).eigenvalues.min();
    Err(LabError::Degenerate(format!(
        "factorization failed after jitter {:.3e}; smallest eigenvalue {worst:.6e}",
        base * 1e3
    )))
}

/// Samples stored row-major: sample `s` occupies `data[s*n_grid .. (s+1)*n_grid]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    pub grid: Vec<f64>,
    pub covariance_id: String,
    pub seed: u64,
    pub n_samples: usize,
    pub data: Vec<f64>,
}

impl FieldSamples {
    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        let n = self.grid.len();
        &self.data[s * n..(s + 1) * n]
    }

    pub fn value(&self, s: usize, j: usize) -> f64 {
        self.data[s * self.grid.len() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_samples).map(|s| self.value(s, j)).collect()
    }

    /// Empirical covariance (known zero mean) of grid points i, j with its standard error.
    pub fn empirical_covariance(&self, i: usize, j: usize) -> (f64, f64) {
        let n = self.n_samples as f64;
        let prods: Vec<f64> = (0..self.n_samples).map(|s| self.value(s, i) * self.value(s, j)).collect();
        let mean = prods.iter().sum::<f64>() / n;
        let var = prods.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        (mean, (var / n).sqrt())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(b"RLFS", 1);
        e.str(&self.covariance_id);
        e.u64(self.seed);
        e.u64(self.n_samples as u64);
        e.f64s(&self.grid);
        e.f64s(&self.data);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"RLFS", 1, "field samples")?;
        let covariance_id = d.str()?;
        let seed = d.u64()?;
        let n_samples = d.u64()? as usize;
        let grid = d.f64s()?;
        let data = d.f64s()?;
        d.finish()?;
        if data.len() != grid.len() * n_samples {
            return Err(LabError::Format("field samples: data size does not match grid × samples".into()));
        }
        Ok(FieldSamples { grid, covariance_id, seed, n_samples, data })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CSV with one row per sample and one column per grid point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# covariance={} seed={}", self.covariance_id, self.seed)?;
        let head: Vec<String> = self.grid.iter().map(|x| format!("x={x}")).collect();
        writeln!(w, "sample,{}", head.join(","))?;
        for s in 0..self.n_samples {
            let row: Vec<String> = self.sample(s).iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{s},{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw `n_samples` i.i.d. mean-zero Gaussian vectors with the spec's covariance.
pub fn sample_field(spec: &GaussianFieldSpec, n_samples: usize, seed: u64) -> Result<FieldSamples> {
    if spec.grid.is_empty() {
        return domain("sample_field needs a nonempty grid");
    }
    let id = spec.covariance.id();
    if n_samples == 0 {
        return Ok(FieldSamples { grid: spec.grid.clone(), covariance_id: id, seed, n_samples: 0, data: Vec::new() });
    }
    let k = covariance_matrix(&spec.grid, spec.covariance.as_ref())?;
    let fac = factorize(&k, spec.jitter)?;
    Ok(sample_with_factor(&spec.grid, &fac, id, n_samples, seed))
}

/// Reuse a factorization for further draws.
pub fn sample_with_factor(grid: &[f64], fac: &Factorization, id: String, n_samples: usize, seed: u64) -> FieldSamples {
    let n = grid.len();
    let mut rng = rng_from(seed);
    let z = DMatrix::from_fn(n, n_samples, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = &fac.lower * z;
    FieldSamples { grid: grid.to_vec(), covariance_id: id, seed, n_samples, data: x.as_slice().to_vec() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChiSquareMode {
    /// Σ ½(ηᵢ + s)², the isomorphism field.
    Isomorphism,
    /// Σ (ηᵢ + s)²; with s = 0 this is the plain chi-square process.
    Plain,
}

#[derive(Debug, Clone)]
pub struct ChiSquareField {
    pub k: usize,
    pub shift: f64,
    pub mode: ChiSquareMode,
    pub component_samples: Vec<FieldSamples>,
    /// Row-major like [`FieldSamples::data`].
    pub values: Vec<f64>,
}

impl ChiSquareField {
    pub fn grid(&self) -> &[f64] {
        &self.component_samples[0].grid
    }

    pub fn n_samples(&self) -> usize {
        self.component_samples[0].n_samples
    }

    pub fn sample(&self, s: usize) -> &[f64] {
        let n = self.grid().len();
        &self.values[s * n..(s + 1) * n]
    }
}

fn square_term(mode: ChiSquareMode, eta: f64, s: f64) -> f64 {
    match mode {
        ChiSquareMode::Isomorphism => 0.5 * (eta + s) * (eta + s),
        ChiSquareMode::Plain => (eta + s) * (eta + s),
    }
}

/// Combine independent components; for the isomorphism field pass
/// η_{1,0}, …, η_{r−1,0} first and η_p last.
pub fn chi_square(fields: Vec<FieldSamples>, s: f64, mode: ChiSquareMode) -> Result<ChiSquareField> {
    let Some(first) = fields.first() else {
        return domain("chi_square needs at least one component");
    };
    for f in &fields[1..] {
        if f.grid != first.grid {
            return domain("chi_square components live on different grids");
        }
        if f.n_samples != first.n_samples {
            return domain("chi_square components have different sample counts");
        }
    }
    let mut values = vec![0.0; first.data.len()];
    for f in &fields {
        for (v, &e) in values.iter_mut().zip(&f.data) {
            *v += square_term(mode, e, s);
        }
    }
    Ok(ChiSquareField { k: fields.len(), shift: s, mode, component_samples: fields, values })
}

/// Pointwise chi-square of single paths sharing one grid.
pub fn chi_square_path(components: &[&[f64]], s: f64, mode: ChiSquareMode) -> Result<Vec<f64>> {
    let Some(first) = components.first() else {
        return domain("chi_square_path needs at least one component");
    };
    if components.iter().any(|c| c.len() != first.len()) {
        return domain("chi_square_path components have different lengths");
    }
    Ok((0..first.len()).map(|i| components.iter().map(|c| square_term(mode, c[i], s)).sum()).collect())
}

/// σ²(u, v) = E(η(u) − η(v))².
pub fn increment_variance(cov: &dyn Covariance, u: f64, v: f64) -> Result<f64> {
    Ok((cov.cov(u, u)? + cov.cov(v, v)? - 2.0 * cov.cov(u, v)?).max(0.0))
}

/// Local target (2σ²(u) log log 1/u)^{1/2}.
pub fn modulus_target_local(sigma2: impl Fn(f64) -> f64, u: f64) -> Result<f64> {
    if !(u > 0.0) || u >= (-1.0f64).exp() {
        return domain(format!("local modulus target needs 0 < u < 1/e, got {u}"));
    }
    let s2 = sigma2(u);
    if !(s2 >= 0.0) {
        return domain(format!("increment variance {s2} at {u} is negative"));
    }
    Ok((2.0 * s2 * (1.0 / u).ln().ln()).sqrt())
}

/// Uniform target (2σ²(u,v) log 1/|u − v|)^{1/2}.
pub fn modulus_target_uniform(sigma2: impl Fn(f64, f64) -> f64, u: f64, v: f64) -> Result<f64> {
    let h = (u - v).abs();
    if !(h > 0.0) || h >= 1.0 {
        return domain(format!("uniform modulus target needs 0 < |u − v| < 1, got {h}"));
    }
    let s2 = sigma2(u, v);
    if !(s2 >= 0.0) {
        return domain(format!("increment variance {s2} at ({u}, {v}) is negative"));
    }
    Ok((2.0 * s2 * (1.0 / h).ln()).sqrt())
}

/// φ̃(x) = (2·slope·x·log 1/x)^{1/2}.
pub fn slope_target(slope: f64, x: f64) -> f64 {
    (2.0 * slope * x * (1.0 / x).ln()).max(0.0).sqrt()
}

/// Largest φ(u,v)/φ̃(C|u − v|) over the given pairs; ≤ 1 means domination holds.
pub fn dominating_ratio(sigma2: impl Fn(f64, f64) -> f64, slope: f64, c: f64, pairs: &[(f64, f64)]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &(u, v) in pairs {
        let h = (u - v).abs();
        if c * h >= 1.0 {
            return domain(format!("C|u − v| = {} must stay below 1", c * h));
        }
        let phi = modulus_target_uniform(&sigma2, u, v)?;
        worst = worst.max(phi / slope_target(slope, c * h));
    }
    Ok(worst)
}

/// sup_{0<h≤x} σ²(h) log 1/h over a dyadic sweep of lags below x.
pub fn lag_condition_sup(sigma2_lag: impl Fn(f64) -> f64, x: f64) -> f64 {
    (0..60).map(|j| x * 0.5f64.powi(j)).map(|h| sigma2_lag(h) * (1.0 / h).ln()).fold(0.0, f64::max)
}

/// η_p(x) = η̄_p(x) + u^p(x)/√u^p(0) · ξ.
///
/// `u_p` holds u^p(x) on the field's grid and `xi` one standard normal per sample.
pub fn eta_p_decomposition(v_field: &FieldSamples, u_p: &[f64], u_p0: f64, xi: &[f64]) -> Result<FieldSamples> {
    if !(u_p0 > 0.0) {
        return Err(LabError::Degenerate(format!("u^p(0) = {u_p0} must be positive")));
    }
    if u_p.len() != v_field.n_grid() || xi.len() != v_field.n_samples {
        return domain("eta_p_decomposition: kernel values or normal draws have the wrong length");
    }
    let root = u_p0.sqrt();
    let mut data = v_field.data.clone();
    for s in 0..v_field.n_samples {
        for (j, up) in u_p.iter().enumerate() {
            data[s * u_p.len() + j] += up / root * xi[s];
        }
    }
    Ok(FieldSamples {
        grid: v_field.grid.clone(),
        covariance_id: format!("decomposed[{}]", v_field.covariance_id),
        seed: v_field.seed,
        n_samples: v_field.n_samples,
        data,
    })
}

/// G(u, v) = (1 − V(v))η(u) − (1 − V(u))η(v) with V(x) = U(x,d)/U(d,d).
pub fn g_remainder(cov: &dyn Covariance, d: f64, eta_u: f64, eta_v: f64, u: f64, v: f64) -> Result<f64> {
    let udd = cov.cov(d, d)?;
    let vu = cov.cov(u, d)? / udd;
    let vv = cov.cov(v, d)? / udd;
    Ok((1.0 - vv) * eta_u - (1.0 - vu) * eta_v)
}

/// Cauchy–Schwarz bound on |G(u, v)|.
pub fn g_bound(cov: &dyn Covariance, d: f64, eta_u: f64, eta_v: f64, u: f64, v: f64) -> Result<f64> {
    let root = cov.cov(d, d)?.sqrt();
    let s_dv = increment_variance(cov, d, v)?.sqrt();
    let s_uv = increment_variance(cov, u, v)?.sqrt();
    Ok(s_dv / root * (eta_u - eta_v).abs() + s_uv / root * eta_v.abs())
}

/// Covariances of the form q(x)q(y)·r(x∧y) with r increasing, i.e. η = q·W(r)
/// for a Brownian motion W. Such fields admit exact midpoint refinement.
pub trait GaussMarkov: Send + Sync {
    fn q(&self, x: f64) -> f64;
    fn r(&self, x: f64) -> f64;
    /// r(b) − r(a) for a < b, computed without cancellation where possible.
    fn r_increment(&self, a: f64, b: f64) -> f64 {
        self.r(b) - self.r(a)
    }
    fn covariance(&self, x: f64, y: f64) -> f64 {
        self.q(x) * self.q(y) * self.r(x.min(y))
    }
}

/// A·e^{−κ|x−y|}; u^β of the Brownian exponent cλ² has κ = √(β/c), A = 1/(2√(βc)).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentialMarkov {
    pub amplitude: f64,
    pub kappa: f64,
}

impl ExponentialMarkov {
    pub fn brownian_u_beta(beta: f64, c: f64) -> Result<Self> {
        if !(beta > 0.0 && c > 0.0) {
            return domain("brownian_u_beta needs beta > 0 and c > 0");
        }
        Ok(ExponentialMarkov { amplitude: 0.5 / (beta * c).sqrt(), kappa: (beta / c).sqrt() })
    }
}

impl GaussMarkov for ExponentialMarkov {
    fn q(&self, x: f64) -> f64 {
        (-self.kappa * x).exp()
    }

    fn r(&self, x: f64) -> f64 {
        self.amplitude * (2.0 * self.kappa * x).exp()
    }

    fn r_increment(&self, a: f64, b: f64) -> f64 {
        self.amplitude * (2.0 * self.kappa * a).exp() * (2.0 * self.kappa * (b - a)).exp_m1()
    }
}

/// rate·(x ∧ y) on x, y ≥ 0; 𝔲⁰ of the exponent cλ² has rate 1/c.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrownianMarkov {
    pub rate: f64,
}

impl GaussMarkov for BrownianMarkov {
    fn q(&self, _x: f64) -> f64 {
        1.0
    }

    fn r(&self, x: f64) -> f64 {
        self.rate * x
    }

    fn r_increment(&self, a: f64, b: f64) -> f64 {
        self.rate * (b - a)
    }
}

/// Exact sample of η on the dyadic grid a + (b − a)i/2^levels by midpoint refinement.
pub fn refine_markov_path<R: Rng + ?Sized>(
    kernel: &dyn GaussMarkov,
    a: f64,
    b: f64,
    levels: u32,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(b > a) || levels > 26 {
        return domain(format!("refinement needs a < b and at most 26 levels, got [{a}, {b}] at {levels}"));
    }
    let r_a = kernel.r(a);
    if !(r_a >= 0.0) || !(kernel.r_increment(a, b) > 0.0) {
        return domain("refinement needs r(a) >= 0 and r increasing on [a, b]");
    }
    let n = 1usize << levels;
    let h = (b - a) / n as f64;
    let x = |i: usize| a + h * i as f64;
    let mut w = vec![0.0; n + 1];
    w[0] = r_a.sqrt() * rng.sample::<f64, _>(StandardNormal);
    w[n] = w[0] + kernel.r_increment(a, b).sqrt() * rng.sample::<f64, _>(StandardNormal);
    let mut step = n;
    while step > 1 {
        let half = step / 2;
        let mut l = 0;
        while l < n {
            let m = l + half;
            let rr = l + step;
            let d1 = kernel.r_increment(x(l), x(m));
            let d2 = kernel.r_increment(x(m), x(rr));
            let tot = d1 + d2;
            let z: f64 = rng.sample(StandardNormal);
            w[m] = w[l] + d1 / tot * (w[rr] - w[l]) + (d1 * d2 / tot).sqrt() * z;
            l = rr;
        }
        step = half;
    }
    Ok(w.iter().enumerate().map(|(i, wi)| kernel.q(x(i)) * wi).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_target_arithmetic() {
        let h = 2f64.powi(-10);
        let v = modulus_target_uniform(|u, v| 2.0 * (u - v).abs(), 0.0, h).unwrap();
        assert!((v - (40.0 * h * 2f64.ln()).sqrt()).abs() < 1e-15);
        assert!((v - 0.164548).abs() < 1e-6, "{v}");
        assert!(modulus_target_uniform(|_, _| 1.0, 0.3, 0.3).is_err());
        let u = (-(1f64.exp().powi(2))).exp();
        let l = modulus_target_local(|u| 2.0 * u, u).unwrap();
        assert!((l - (8.0 * u).sqrt()).abs() < 1e-15);
        assert!(modulus_target_local(|u| u, 0.5).is_err());
    }

    #[test]
    fn chi_square_trivial_cases() {
        let f = FieldSamples { grid: vec![0.0, 1.0], covariance_id: "zero".into(), seed: 0, n_samples: 2, data: vec![0.0; 4] };
        let g = chi_square(vec![f.clone(), f.clone(), f.clone()], 2.0, ChiSquareMode::Isomorphism).unwrap();
        assert!(g.values.iter().all(|&v| v == 6.0));
        let mut other = f.clone();
        other.grid = vec![0.0, 2.0];
        assert!(chi_square(vec![f, other], 0.0, ChiSquareMode::Plain).is_err());
    }

    #[test]
    fn markov_forms_match_kernels() {
        let e = ExponentialMarkov::brownian_u_beta(1.0, 0.5).unwrap();
        let want = (-(2f64.sqrt()) * 0.7).exp() / 2f64.sqrt();
        assert!((e.covariance(0.1, 0.8) - want).abs() < 1e-14);
        assert!((e.r_increment(0.2, 0.5) - (e.r(0.5) - e.r(0.2))).abs() < 1e-14);
        assert!((BrownianMarkov { rate: 2.0 }.covariance(0.3, 0.9) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn refinement_reproduces_covariance() {
        let k = ExponentialMarkov::brownian_u_beta(1.0, 0.5).unwrap();
        let mut rng = rng_from(11);
        let n = 20_000;
        let (mut c00, mut c0m, mut cmm) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let p = refine_markov_path(&k, 0.0, 1.0, 3, &mut rng).unwrap();
            c00 += p[0] * p[0];
            c0m += p[0] * p[3];
            cmm += p[3] * p[3];
        }
        let nn = n as f64;
        let a = 1.0 / 2f64.sqrt();
        assert!((c00 / nn - a).abs() < 0.03);
        assert!((cmm / nn - a).abs() < 0.03);
        assert!((c0m / nn - a * (-(2f64.sqrt()) * 0.375).exp()).abs() < 0.03);
    }
}
