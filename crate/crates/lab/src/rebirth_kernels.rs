//! Potential densities of fully and partially rebirthed processes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{domain, LabError, Result};
use crate::measure::Measure;
use crate::process::{BaseProcess, CaseId};
use crate::quadrature::adaptive;

fn default_exile_label() -> String {
    "exile".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RebirthSpec {
    /// Reborn from the probability measure μ at every death.
    Full { mu: Measure },
    /// Returned according to ν/|ν| with probability |ν|/(1+|ν|), else exiled.
    Partial {
        nu: Measure,
        #[serde(default = "default_exile_label")]
        exile_label: String,
    },
}

impl RebirthSpec {
    pub fn full(mu: Measure) -> Self {
        RebirthSpec::Full { mu }
    }

    pub fn partial(nu: Measure) -> Self {
        RebirthSpec::Partial { nu, exile_label: default_exile_label() }
    }

    pub fn measure(&self) -> &Measure {
        match self {
            RebirthSpec::Full { mu } => mu,
            RebirthSpec::Partial { nu, .. } => nu,
        }
    }

    /// Probability of exile at each death (0 for full rebirth).
    pub fn exile_probability(&self) -> f64 {
        match self {
            RebirthSpec::Full { .. } => 0.0,
            RebirthSpec::Partial { nu, .. } => 1.0 / (1.0 + nu.total_mass()),
        }
    }

    pub fn validate(&self, base: &BaseProcess) -> Result<()> {
        let m = self.measure();
        m.validate()?;
        if let RebirthSpec::Full { mu } = self {
            let mass = mu.total_mass();
            if (mass - 1.0).abs() > 1e-10 {
                return domain(format!("rebirth measure must be a probability, total mass {mass}"));
            }
        }
        if !m.total_mass().is_finite() {
            return domain("rebirth measure has infinite mass");
        }
        if m.charges(|x| !base.in_state_space(x)) {
            return domain(format!("rebirth measure charges points outside the state space of case {}", base.case.index()));
        }
        Ok(())
    }
}

/// f(y) = ∫ u^p(x,y) dμ(x).
pub fn f_of(base: &BaseProcess, p: f64, measure: &Measure, y: f64) -> Result<f64> {
    if measure.total_mass() <= 0.0 {
        return domain("f_of needs a nonempty measure");
    }
    measure.integrate(|x| base.potential(p, x, y))
}

/// w^p for a full rebirth of one of the six base cases.
#[derive(Debug, Clone)]
pub struct RebirthKernel {
    pub base: Arc<BaseProcess>,
    pub mu: Measure,
    pub p: f64,
    pub l1_norm_f: f64,
    /// Truncation tail bound accumulated in ‖f‖₁.
    pub l1_tail_bound: f64,
}

impl RebirthKernel {
    pub fn new(base: Arc<BaseProcess>, mu: Measure, p: f64) -> Result<Self> {
        if !(p > 0.0) {
            return domain(format!("rebirth kernel needs p > 0, got {p}"));
        }
        RebirthSpec::full(mu.clone()).validate(&base)?;
        // ‖f‖₁ = ∫∫u^p(x,y) m(dy) μ(dx) by Fubini.
        let mut tail = 0.0;
        let l1 = mu.integrate(|x| {
            let m = base.mass(p, x)?;
            tail += m.tail_bound;
            Ok(m.value)
        })?;
        if !(l1 > 0.0) {
            return Err(LabError::Degenerate(format!("‖f‖₁ = {l1} is not positive")));
        }
        if tail > 0.01 * l1 {
            return Err(LabError::Numerical(format!(
                "‖f‖₁ truncation tail {tail:.3e} exceeds 1% of its value {l1:.3e}; widen the domain"
            )));
        }
        Ok(RebirthKernel { base, mu, p, l1_norm_f: l1, l1_tail_bound: tail })
    }

    pub fn case(&self) -> CaseId {
        self.base.case
    }

    pub fn f(&self, y: f64) -> Result<f64> {
        f_of(&self.base, self.p, &self.mu, y)
    }

    pub fn f_values(&self, grid: &[f64]) -> Result<Vec<f64>> {
        grid.iter().map(|&y| self.f(y)).collect()
    }

    /// w^p(x,y) with the closed-form simplifications of the Lévy cases.
    pub fn w_p(&self, x: f64, y: f64) -> Result<f64> {
        let p = self.p;
        let beta = self.base.beta;
        let b = beta + p;
        let fy = self.f(y)?;
        match (self.base.case, self.base.levy()) {
            (CaseId::Case1, Some(k)) => Ok(k.u_beta(b, x - y)? + beta / p * fy),
            (CaseId::Case2, Some(k)) => {
                let ratio = k.u_beta(b, x)? / k.u_beta(b, 0.0)?;
                Ok(k.v_beta(b, x, y)? + (beta / p + ratio) / b * fy / self.l1_norm_f)
            }
            (CaseId::Case3, Some(k)) => {
                let ratio = k.u_beta(p, x)? / k.u_beta(p, 0.0)?;
                Ok(k.v_beta(p, x, y)? + ratio / p * fy / self.l1_norm_f)
            }
            _ => {
                let mass = self.base.mass(p, x)?.value;
                Ok(self.base.potential(p, x, y)? + (1.0 / p - mass) * fy / self.l1_norm_f)
            }
        }
    }

    /// ∫ w^p(x,y) m(dy) over `[lo, hi]`, split at x and at μ's atoms.
    pub fn row_integral(&self, x: f64, lo: f64, hi: f64) -> Result<f64> {
        let mut breaks = vec![lo, hi];
        if x > lo && x < hi {
            breaks.push(x);
        }
        for &(a, _) in &self.mu.atoms {
            if a > lo && a < hi {
                breaks.push(a);
            }
        }
        if self.base.case.killed_at_zero() && lo < 0.0 && hi > 0.0 {
            breaks.push(0.0);
        }
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();
        let err = std::cell::RefCell::new(None);
        let g = |y: f64| {
            if !self.base.in_state_space(y) {
                return 0.0;
            }
            match self.w_p(x, y).and_then(|w| Ok(w * self.base.reference_density(y)?)) {
                Ok(v) => v,
                Err(e) => {
                    err.borrow_mut().get_or_insert(e.to_string());
                    0.0
                }
            }
        };
        let mut total = 0.0;
        for w in breaks.windows(2) {
            total += adaptive(&g, w[0], w[1], 1e-12, 1e-10, 400).value;
        }
        match err.into_inner() {
            Some(e) => Err(LabError::Numerical(e)),
            None => Ok(total),
        }
    }

    /// Σ_{r≥2} E^x[e^{−pζ_{r−1}}] = E^x[e^{−pζ}]/(p‖f‖₁).
    pub fn rebirth_sum(&self, x: f64) -> Result<f64> {
        Ok(killing_laplace(&self.base, self.p, x)? / (self.p * self.l1_norm_f))
    }
}

/// E^x[e^{−pζ}] = 1 − p∫u^p(x,z) m(dz).
pub fn killing_laplace(base: &BaseProcess, p: f64, x: f64) -> Result<f64> {
    if !(p > 0.0) {
        return domain(format!("killing_laplace needs p > 0, got {p}"));
    }
    let m = base.mass(p, x)?;
    Ok(1.0 - p * m.value)
}

/// ũ⁰(x,y) = u⁰(x,y) + ∫ u⁰(z,y) dν(z).
pub fn u_tilde0_partial(base: &BaseProcess, nu: &Measure, x: f64, y: f64) -> Result<f64> {
    nu.validate()?;
    if nu.charges(|z| !base.in_state_space(z)) {
        return domain("ν charges points outside the state space");
    }
    Ok(base.potential(0.0, x, y)? + f_of(base, 0.0, nu, y)?)
}

/// (mass still in S, mass already exiled) for the i-th cycle.
pub fn cycle_weights_partial(nu: &Measure, i: u32) -> (f64, f64) {
    let m = nu.total_mass();
    let stay = (m / (1.0 + m)).powi(i.max(1) as i32 - 1);
    (stay, 1.0 - stay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_kernels::{LevyExponentSpec, LevyKernels};
    use crate::process::Family;

    fn case1(beta: f64) -> Arc<BaseProcess> {
        let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
        Arc::new(BaseProcess::new(CaseId::Case1, Family::Levy(k), beta).unwrap())
    }

    #[test]
    fn case1_examples() {
        let base = case1(1.0);
        let k = RebirthKernel::new(base.clone(), Measure::dirac(0.0), 1.0).unwrap();
        assert!((k.f(0.0).unwrap() - 0.5).abs() < 1e-9);
        assert!((k.w_p(0.0, 0.0).unwrap() - 1.0).abs() < 1e-9);
        assert!((k.l1_norm_f - 0.5).abs() < 1e-12);
        assert!((killing_laplace(&base, 1.0, 0.3).unwrap() - 0.5).abs() < 1e-12);
        assert!((k.rebirth_sum(0.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partial_example() {
        let base = case1(1.0);
        let nu = Measure::weighted_atom(1.0, 0.5);
        let v = u_tilde0_partial(&base, &nu, 0.0, 0.0).unwrap();
        let want = 1.0 / 2f64.sqrt() + 0.5 * (-(2f64.sqrt())).exp() / 2f64.sqrt();
        assert!((v - want).abs() < 1e-9);
    }

    #[test]
    fn cycle_weights() {
        let nu = Measure::weighted_atom(0.3, 1.0);
        assert_eq!(cycle_weights_partial(&nu, 1), (1.0, 0.0));
        assert_eq!(cycle_weights_partial(&nu, 3), (0.25, 0.75));
    }

    #[test]
    fn rejects_bad_measures() {
        let base = case1(1.0);
        assert!(RebirthKernel::new(base.clone(), Measure::weighted_atom(0.0, 0.5), 1.0).is_err());
        assert!(RebirthKernel::new(base, Measure::dirac(0.0), 0.0).is_err());
    }
}
