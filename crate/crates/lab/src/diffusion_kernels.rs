//! Scale functions, speed densities and factorized potential densities for
//! one-dimensional diffusions with generator ½a²(x)d²/dx² + c(x)d/dx.
//!
//! Convention: s′(x) = exp(−∫₀ˣ 2c/a²), s(0) = 0, m′(x) = 2/(a²(x)s′(x)).
//! All kernels here are densities with respect to m.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::quadrature::gk21;

type CoefFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Coefficients {
    /// a ≡ 1, c ≡ 0.
    Bm,
    /// a ≡ 1, c ≡ drift.
    BmDrift { drift: f64 },
    /// a ≡ 1, c(x) = −θx.
    Ou { theta: f64 },
    /// Piecewise-linear (x, a, c) table, constant beyond its ends.
    Tabulated { x: Vec<f64>, a: Vec<f64>, c: Vec<f64> },
    #[serde(skip)]
    Custom { a: CoefFn, c: CoefFn },
}

impl std::fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Coefficients::Bm => write!(f, "Bm"),
            Coefficients::BmDrift { drift } => write!(f, "BmDrift({drift})"),
            Coefficients::Ou { theta } => write!(f, "Ou({theta})"),
            Coefficients::Tabulated { x, .. } => write!(f, "Tabulated({} nodes)", x.len()),
            Coefficients::Custom { .. } => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionSpec {
    pub coefficients: Coefficients,
    pub x_lo: f64,
    pub x_hi: f64,
}

fn lerp_table(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let i = xs.partition_point(|&t| t <= x) - 1;
    let t = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] * (1.0 - t) + ys[i + 1] * t
}

impl DiffusionSpec {
    pub fn bm(x_lo: f64, x_hi: f64) -> Self {
        DiffusionSpec { coefficients: Coefficients::Bm, x_lo, x_hi }
    }

    pub fn with(coefficients: Coefficients, x_lo: f64, x_hi: f64) -> Self {
        DiffusionSpec { coefficients, x_lo, x_hi }
    }

    pub fn custom(
        a: impl Fn(f64) -> f64 + Send + Sync + 'static,
        c: impl Fn(f64) -> f64 + Send + Sync + 'static,
        x_lo: f64,
        x_hi: f64,
    ) -> Self {
        DiffusionSpec { coefficients: Coefficients::Custom { a: Arc::new(a), c: Arc::new(c) }, x_lo, x_hi }
    }

    /// Read a tabulated spec from CSV rows `x,a,c` (header optional).
    pub fn from_csv(path: &Path, x_lo: f64, x_hi: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let (mut xs, mut as_, mut cs) = (Vec::new(), Vec::new(), Vec::new());
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let nums: std::result::Result<Vec<f64>, _> = parts.iter().map(|p| p.parse::<f64>()).collect();
            match nums {
                Ok(v) if v.len() == 3 => {
                    xs.push(v[0]);
                    as_.push(v[1]);
                    cs.push(v[2]);
                }
                _ if ln == 0 => continue,
                _ => return Err(LabError::Format(format!("{}:{}: expected x,a,c", path.display(), ln + 1))),
            }
        }
        let spec = DiffusionSpec { coefficients: Coefficients::Tabulated { x: xs, a: as_, c: cs }, x_lo, x_hi };
        spec.validate()?;
        Ok(spec)
    }

    pub fn a(&self, x: f64) -> f64 {
        match &self.coefficients {
            Coefficients::Bm | Coefficients::BmDrift { .. } | Coefficients::Ou { .. } => 1.0,
            Coefficients::Tabulated { x: xs, a, .. } => lerp_table(xs, a, x),
            Coefficients::Custom { a, .. } => a(x),
        }
    }

    pub fn c(&self, x: f64) -> f64 {
        match &self.coefficients {
            Coefficients::Bm => 0.0,
            Coefficients::BmDrift { drift } => *drift,
            Coefficients::Ou { theta } => -theta * x,
            Coefficients::Tabulated { x: xs, c, .. } => lerp_table(xs, c, x),
            Coefficients::Custom { c, .. } => c(x),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_lo < self.x_hi) || !self.x_lo.is_finite() || !self.x_hi.is_finite() {
            return domain(format!("diffusion domain [{}, {}] must be a bounded interval", self.x_lo, self.x_hi));
        }
        if self.x_lo > 0.0 || self.x_hi <= 0.0 {
            return domain("diffusion domain must contain the reference point 0");
        }
        if let Coefficients::Tabulated { x, a, c } = &self.coefficients {
            if x.len() < 2 || x.len() != a.len() || x.len() != c.len() {
                return domain("tabulated coefficients need matching x, a, c columns (≥ 2 rows)");
            }
            if x.windows(2).any(|w| w[1] <= w[0]) {
                return domain("tabulated x column must be strictly increasing");
            }
        }
        let n = 2000;
        for i in 0..=n {
            let x = self.x_lo + (self.x_hi - self.x_lo) * i as f64 / n as f64;
            let a = self.a(x);
            if a == 0.0 || !a.is_finite() || !self.c(x).is_finite() {
                return domain(format!("diffusion coefficient vanishes or is not finite at x={x}"));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_lo && x <= self.x_hi
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            domain(format!("x={x} outside diffusion domain [{}, {}]", self.x_lo, self.x_hi))
        }
    }

    /// ∂/∂x log s′ = −2c/a².
    fn log_sprime_rate(&self, x: f64) -> f64 {
        let a = self.a(x);
        -2.0 * self.c(x) / (a * a)
    }
}

const SCALE_CELLS: usize = 4096;

/// Tabulated scale function with exact per-cell refinement.
#[derive(Debug, Clone)]
pub struct ScaleFunction {
    spec: DiffusionSpec,
    nodes: Vec<f64>,
    /// log s′ at nodes.
    log_sp: Vec<f64>,
    s: Vec<f64>,
}

impl ScaleFunction {
    pub fn new(spec: &DiffusionSpec) -> Result<Self> {
        spec.validate()?;
        let (lo, hi) = (spec.x_lo, spec.x_hi);
        // Nodes include 0 exactly so that s(0) = 0 without interpolation.
        let mut nodes: Vec<f64> = (0..=SCALE_CELLS).map(|i| lo + (hi - lo) * i as f64 / SCALE_CELLS as f64).collect();
        let zi = nodes.partition_point(|&x| x < 0.0);
        if zi >= nodes.len() || nodes[zi] != 0.0 {
            nodes.insert(zi, 0.0);
        }
        let n = nodes.len();
        let mut log_sp = vec![0.0; n];
        let mut s = vec![0.0; n];
        let rate = |x: f64| spec.log_sprime_rate(x);
        for i in zi + 1..n {
            log_sp[i] = log_sp[i - 1] + gk21(&rate, nodes[i - 1], nodes[i]).0;
            let base = log_sp[i - 1];
            let x0 = nodes[i - 1];
            let sp = |u: f64| (base + gk21(&rate, x0, u).0).exp();
            s[i] = s[i - 1] + gk21(&sp, x0, nodes[i]).0;
        }
        for i in (0..zi).rev() {
            log_sp[i] = log_sp[i + 1] - gk21(&rate, nodes[i], nodes[i + 1]).0;
            let base = log_sp[i + 1];
            let x1 = nodes[i + 1];
            let sp = |u: f64| (base - gk21(&rate, u, x1).0).exp();
            s[i] = s[i + 1] - gk21(&sp, nodes[i], x1).0;
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(LabError::Numerical("scale function is not strictly increasing".into()));
        }
        Ok(ScaleFunction { spec: spec.clone(), nodes, log_sp, s })
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    fn cell(&self, x: f64) -> usize {
        (self.nodes.partition_point(|&t| t <= x).max(1) - 1).min(self.nodes.len() - 2)
    }

    fn log_s_prime(&self, x: f64) -> f64 {
        let i = self.cell(x);
        let rate = |u: f64| self.spec.log_sprime_rate(u);
        self.log_sp[i] + gk21(&rate, self.nodes[i], x).0
    }

    pub fn s_prime(&self, x: f64) -> Result<f64> {
        self.spec.check(x)?;
        Ok(self.log_s_prime(x).exp())
    }

    pub fn s(&self, x: f64) -> Result<f64> {
        self.spec.check(x)?;
        let i = self.cell(x);
        let x0 = self.nodes[i];
        if x == x0 {
            return Ok(self.s[i]);
        }
        let base = self.log_sp[i];
        let rate = |u: f64| self.spec.log_sprime_rate(u);
        let sp = |u: f64| (base + gk21(&rate, x0, u).0).exp();
        Ok(self.s[i] + gk21(&sp, x0, x).0)
    }

    /// Speed density m′(x) = 2/(a²s′).
    pub fn speed_density(&self, x: f64) -> Result<f64> {
        let a = self.spec.a(x);
        Ok(2.0 / (a * a * self.s_prime(x)?))
    }
}

/// s(x) per the convention above.
pub fn scale_function(spec: &DiffusionSpec, x: f64) -> Result<f64> {
    ScaleFunction::new(spec)?.s(x)
}

/// Increasing/decreasing solutions of ½a²u″ + cu′ = βu, scaled so that
/// q p′ − p q′ = s′.
#[derive(Debug, Clone)]
pub struct KernelFactors {
    pub beta: f64,
    pub grid: Vec<f64>,
    pub p_values: Vec<f64>,
    pub q_values: Vec<f64>,
    dp: Vec<f64>,
    dq: Vec<f64>,
    /// Wronskian divided by s′ (equals 1 after scaling).
    pub wronskian: f64,
    /// Largest relative deviation of (qp′ − pq′)/s′ from its mean.
    pub wronskian_drift: f64,
    spec: DiffusionSpec,
    scale: Arc<ScaleFunction>,
    p_mass: Vec<f64>,
    q_mass: Vec<f64>,
}

const FACTOR_CELLS: usize = 8192;

fn ode_rhs(spec: &DiffusionSpec, beta: f64, x: f64, u: f64, du: f64) -> (f64, f64) {
    let a = spec.a(x);
    (du, 2.0 * (beta * u - spec.c(x) * du) / (a * a))
}

fn rk4(spec: &DiffusionSpec, beta: f64, x: f64, (u, du): (f64, f64), h: f64) -> (f64, f64) {
    let k1 = ode_rhs(spec, beta, x, u, du);
    let k2 = ode_rhs(spec, beta, x + 0.5 * h, u + 0.5 * h * k1.0, du + 0.5 * h * k1.1);
    let k3 = ode_rhs(spec, beta, x + 0.5 * h, u + 0.5 * h * k2.0, du + 0.5 * h * k2.1);
    let k4 = ode_rhs(spec, beta, x + h, u + h * k3.0, du + h * k3.1);
    (
        u + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
        du + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    )
}

/// Roots of ½a²κ² + cκ − β = 0 with frozen coefficients at x.
fn frozen_rates(spec: &DiffusionSpec, beta: f64, x: f64) -> (f64, f64) {
    let a2 = spec.a(x).powi(2);
    let c = spec.c(x);
    let d = (c * c + 2.0 * beta * a2).sqrt();
    ((-c + d) / a2, (-c - d) / a2)
}

pub fn solve_factors(spec: &DiffusionSpec, beta: f64) -> Result<KernelFactors> {
    let scale = Arc::new(ScaleFunction::new(spec)?);
    solve_factors_with(scale, beta)
}

fn solve_factors_with(scale: Arc<ScaleFunction>, beta: f64) -> Result<KernelFactors> {
    if !(beta > 0.0) {
        return domain(format!("solve_factors needs beta > 0, got {beta}"));
    }
    let spec = scale.spec().clone();
    let (lo, hi) = (spec.x_lo, spec.x_hi);
    let grid: Vec<f64> = (0..=FACTOR_CELLS).map(|i| lo + (hi - lo) * i as f64 / FACTOR_CELLS as f64).collect();
    let n = grid.len();
    let (mut p, mut dp) = (vec![0.0; n], vec![0.0; n]);
    let (mut q, mut dq) = (vec![0.0; n], vec![0.0; n]);
    // Boundary slopes from the frozen-coefficient decay rates.
    p[0] = 1.0;
    dp[0] = frozen_rates(&spec, beta, lo).0;
    for i in 1..n {
        let (u, du) = rk4(&spec, beta, grid[i - 1], (p[i - 1], dp[i - 1]), grid[i] - grid[i - 1]);
        p[i] = u;
        dp[i] = du;
    }
    q[n - 1] = 1.0;
    dq[n - 1] = frozen_rates(&spec, beta, hi).1;
    for i in (0..n - 1).rev() {
        let (u, du) = rk4(&spec, beta, grid[i + 1], (q[i + 1], dq[i + 1]), grid[i] - grid[i + 1]);
        q[i] = u;
        dq[i] = du;
    }
    if p.iter().chain(&q).chain(&dp).chain(&dq).any(|v| !v.is_finite()) {
        return Err(LabError::Numerical(format!(
            "factor ODE overflowed at beta={beta}; shrink the domain [{lo}, {hi}]"
        )));
    }
    if dp.iter().any(|&d| !(d > 0.0)) || dq.iter().any(|&d| !(d < 0.0)) {
        return Err(LabError::Numerical(format!("factor monotonicity lost at beta={beta}")));
    }
    let ratios: Vec<f64> = (0..n)
        .map(|i| Ok((q[i] * dp[i] - p[i] * dq[i]) / scale.s_prime(grid[i])?))
        .collect::<Result<_>>()?;
    let mean = ratios.iter().sum::<f64>() / n as f64;
    let drift = ratios.iter().map(|r| (r / mean - 1.0).abs()).fold(0.0, f64::max);
    if drift > 1e-6 {
        return Err(LabError::Numerical(format!(
            "Wronskian/s' varies by {drift:.2e} across the grid at beta={beta}"
        )));
    }
    // Split the normalization so that p(0) = q(0).
    let z = grid.partition_point(|&x| x < 0.0).min(n - 1);
    let (p0, q0) = {
        let (pu, _) = rk4(&spec, beta, grid[z], (p[z], dp[z]), 0.0 - grid[z]);
        let (qu, _) = rk4(&spec, beta, grid[z], (q[z], dq[z]), 0.0 - grid[z]);
        (pu, qu)
    };
    let kp = (q0 / (p0 * mean)).sqrt();
    let kq = 1.0 / (mean * kp);
    for v in p.iter_mut().chain(dp.iter_mut()) {
        *v *= kp;
    }
    for v in q.iter_mut().chain(dq.iter_mut()) {
        *v *= kq;
    }
    let mut f = KernelFactors {
        beta,
        grid,
        p_values: p,
        q_values: q,
        dp,
        dq,
        wronskian: 1.0,
        wronskian_drift: drift,
        spec,
        scale,
        p_mass: vec![],
        q_mass: vec![],
    };
    f.build_masses()?;
    Ok(f)
}

/// Result of ∫ū(x,z)m(dz) over the truncated domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassEval {
    pub value: f64,
    /// Frozen-coefficient estimate of the mass lost outside the domain.
    pub tail_bound: f64,
}

impl KernelFactors {
    fn cell(&self, x: f64) -> usize {
        (self.grid.partition_point(|&t| t <= x).max(1) - 1).min(self.grid.len() - 2)
    }

    fn check(&self, x: f64) -> Result<()> {
        self.spec.check(x)
    }

    pub fn spec(&self) -> &DiffusionSpec {
        &self.spec
    }

    pub fn scale(&self) -> &Arc<ScaleFunction> {
        &self.scale
    }

    fn p_at(&self, x: f64) -> (f64, f64) {
        let i = self.cell(x);
        rk4(&self.spec, self.beta, self.grid[i], (self.p_values[i], self.dp[i]), x - self.grid[i])
    }

    fn q_at(&self, x: f64) -> (f64, f64) {
        let i = (self.cell(x) + 1).min(self.grid.len() - 1);
        rk4(&self.spec, self.beta, self.grid[i], (self.q_values[i], self.dq[i]), x - self.grid[i])
    }

    pub fn p(&self, x: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.p_at(x).0)
    }

    pub fn q(&self, x: f64) -> Result<f64> {
        self.check(x)?;
        Ok(self.q_at(x).0)
    }

    fn build_masses(&mut self) -> Result<()> {
        let n = self.grid.len();
        let mut pm = vec![0.0; n];
        let mut qm = vec![0.0; n];
        let sc = self.scale.clone();
        for i in 1..n {
            let f = |z: f64| self.p_at(z).0 * sc.speed_density(z).unwrap_or(0.0);
            pm[i] = pm[i - 1] + gk21(&f, self.grid[i - 1], self.grid[i]).0;
        }
        for i in (0..n - 1).rev() {
            let f = |z: f64| self.q_at(z).0 * sc.speed_density(z).unwrap_or(0.0);
            qm[i] = qm[i + 1] + gk21(&f, self.grid[i], self.grid[i + 1]).0;
        }
        self.p_mass = pm;
        self.q_mass = qm;
        Ok(())
    }

    /// ∫_{x_lo}^x p m′ and ∫_x^{x_hi} q m′.
    fn cumulative(&self, x: f64) -> (f64, f64) {
        let i = self.cell(x);
        let sc = &self.scale;
        let fp = |z: f64| self.p_at(z).0 * sc.speed_density(z).unwrap_or(0.0);
        let fq = |z: f64| self.q_at(z).0 * sc.speed_density(z).unwrap_or(0.0);
        let left = self.p_mass[i] + gk21(&fp, self.grid[i], x).0;
        let right = self.q_mass[i + 1] + gk21(&fq, x, self.grid[i + 1]).0;
        (left, right)
    }

    /// Frozen-coefficient estimates of ∫_{-∞}^{x_lo} p m′ and ∫_{x_hi}^∞ q m′.
    fn outer_tails(&self) -> Result<(f64, f64)> {
        let (lo, hi) = (self.spec.x_lo, self.spec.x_hi);
        let sc = &self.scale;
        let (kp, _) = frozen_rates(&self.spec, self.beta, lo);
        let (_, kq) = frozen_rates(&self.spec, self.beta, hi);
        let grow_lo = kp - self.spec.log_sprime_rate(lo);
        let grow_hi = kq - self.spec.log_sprime_rate(hi);
        let t_lo = self.p_values[0] * sc.speed_density(lo)? / grow_lo.max(1e-300);
        let t_hi = self.q_values[self.grid.len() - 1] * sc.speed_density(hi)? / (-grow_hi).max(1e-300);
        Ok((t_lo.abs(), t_hi.abs()))
    }

    /// ∫ū^β(x,z) m(dz) over the domain with a tail estimate.
    pub fn mass(&self, x: f64) -> Result<MassEval> {
        self.check(x)?;
        let (left, right) = self.cumulative(x);
        let (px, qx) = (self.p_at(x).0, self.q_at(x).0);
        let (t_lo, t_hi) = self.outer_tails()?;
        Ok(MassEval { value: qx * left + px * right, tail_bound: qx * t_lo + px * t_hi })
    }

    /// ∫_0^∞ v̄^β(x,z) m(dz) for the process killed at 0, x > 0.
    pub fn killed_mass(&self, x: f64) -> Result<MassEval> {
        self.check(x)?;
        if x < 0.0 || !self.spec.contains(0.0) {
            return domain("killed_mass needs x >= 0 inside a domain containing 0");
        }
        let (l0, r0) = self.cumulative(0.0);
        let (lx, rx) = self.cumulative(x);
        let (px, qx) = (self.p_at(x).0, self.q_at(x).0);
        let (p0, q0) = (self.p_at(0.0).0, self.q_at(0.0).0);
        let g = px - qx * p0 / q0;
        let value = qx * (lx - l0) + g * rx + qx / q0 * p0 * (rx - r0);
        let (_, t_hi) = self.outer_tails()?;
        Ok(MassEval { value, tail_bound: g.abs() * t_hi })
    }
}

/// ū^β(x,y) = p(x∧y) q(x∨y).
pub fn u_bar_beta(f: &KernelFactors, x: f64, y: f64) -> Result<f64> {
    f.check(x)?;
    f.check(y)?;
    let (l, r) = if x <= y { (x, y) } else { (y, x) };
    Ok(f.p_at(l).0 * f.q_at(r).0)
}

/// v̄^β(x,y) = ū(x,y) − ū(x,0)ū(0,y)/ū(0,0), the kernel killed at 0.
pub fn v_bar_beta(f: &KernelFactors, x: f64, y: f64) -> Result<f64> {
    if x < 0.0 || y < 0.0 {
        return domain("v_bar_beta lives on the half line x, y >= 0");
    }
    let u00 = u_bar_beta(f, 0.0, 0.0)?;
    if !(u00 > 0.0) {
        return Err(LabError::Degenerate("ū(0,0) vanishes".into()));
    }
    if x == 0.0 || y == 0.0 {
        return Ok(0.0);
    }
    // Same-side form q(x∨y)[p(x∧y) − p(0)q(x∧y)/q(0)] avoids cancellation.
    let (l, r) = if x <= y { (x, y) } else { (y, x) };
    let (p0, q0) = (f.p_at(0.0).0, f.q_at(0.0).0);
    let (pl, ql) = (f.p_at(l).0, f.q_at(l).0);
    Ok(f.q_at(r).0 * (pl - p0 * ql / q0))
}

/// s(x) ∧ s(y).
pub fn frak_u0_diffusion(scale: &ScaleFunction, x: f64, y: f64) -> Result<f64> {
    if x < 0.0 || y < 0.0 {
        return domain("frak_u0_diffusion lives on the half line x, y >= 0");
    }
    Ok(scale.s(x)?.min(scale.s(y)?))
}

/// 𝔥̄^p(x,y) = s(x)∧s(y) − v̄^p(x,y).
pub fn difference_kernel(f: &KernelFactors, x: f64, y: f64) -> Result<f64> {
    Ok(frak_u0_diffusion(&f.scale, x, y)? - v_bar_beta(f, x, y)?)
}

/// Shared scale function plus per-β factor cache.
pub struct DiffusionKernels {
    scale: Arc<ScaleFunction>,
    factors: RwLock<HashMap<u64, Arc<KernelFactors>>>,
}

impl std::fmt::Debug for DiffusionKernels {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionKernels").field("spec", self.scale.spec()).finish()
    }
}

impl DiffusionKernels {
    pub fn new(spec: DiffusionSpec) -> Result<Self> {
        Ok(DiffusionKernels { scale: Arc::new(ScaleFunction::new(&spec)?), factors: RwLock::new(HashMap::new()) })
    }

    pub fn spec(&self) -> &DiffusionSpec {
        self.scale.spec()
    }

    pub fn scale(&self) -> &ScaleFunction {
        &self.scale
    }

    pub fn factors(&self, beta: f64) -> Result<Arc<KernelFactors>> {
        if let Some(f) = self.factors.read().get(&beta.to_bits()) {
            return Ok(f.clone());
        }
        let f = Arc::new(solve_factors_with(self.scale.clone(), beta)?);
        self.factors.write().insert(beta.to_bits(), f.clone());
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_examples() {
        let bm = DiffusionSpec::bm(-5.0, 5.0);
        assert!((scale_function(&bm, 0.7).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(scale_function(&bm, 0.0).unwrap(), 0.0);
        let drift = DiffusionSpec::with(Coefficients::BmDrift { drift: -1.0 }, -2.0, 2.0);
        let want = (2f64.exp() - 1.0) / 2.0;
        assert!((scale_function(&drift, 1.0).unwrap() - want).abs() < 1e-10);
        assert!(scale_function(&bm, 6.0).is_err());
    }

    #[test]
    fn brownian_factors_match_exponentials() {
        let spec = DiffusionSpec::bm(-8.0, 8.0);
        let f = solve_factors(&spec, 1.0).unwrap();
        let k = 2f64.sqrt();
        // Wronskian normalization gives p(0)q(0) = 1/(2√2).
        let u00 = u_bar_beta(&f, 0.0, 0.0).unwrap();
        assert!((u00 - 1.0 / (2.0 * k)).abs() < 1e-9, "{u00}");
        for x in [-3.0, -0.5, 0.0, 1.25, 4.0] {
            let p = f.p(x).unwrap();
            let q = f.q(x).unwrap();
            assert!((p / (k * x).exp() / f.p(0.0).unwrap() - 1.0).abs() < 1e-8);
            assert!((q / (-k * x).exp() / f.q(0.0).unwrap() - 1.0).abs() < 1e-8);
        }
        assert!(f.wronskian_drift < 1e-6);
    }

    #[test]
    fn conservative_mass_is_one_over_beta() {
        let spec = DiffusionSpec::with(Coefficients::Ou { theta: 0.5 }, -8.0, 8.0);
        let dk = DiffusionKernels::new(spec).unwrap();
        let f = dk.factors(2.0).unwrap();
        let m = f.mass(0.3).unwrap();
        assert!((m.value - 0.5).abs() < 1e-7, "{m:?}");
        assert!(m.tail_bound < 1e-6);
    }

    #[test]
    fn killed_kernel_vanishes_at_origin() {
        let f = solve_factors(&DiffusionSpec::bm(0.0, 8.0), 1.0).unwrap();
        assert_eq!(v_bar_beta(&f, 1.0, 0.0).unwrap(), 0.0);
        let k = 2f64.sqrt();
        // Killed Brownian kernel: (1 − e^{−2√2})/(2√2) at x = y = 1 in speed units.
        let want = (1.0 - (-2.0 * k).exp()) / (2.0 * k);
        assert!((v_bar_beta(&f, 1.0, 1.0).unwrap() - want).abs() < 1e-9);
    }
}
