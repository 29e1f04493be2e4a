//! The six base processes: a Lévy or diffusion family together with its
//! killing mechanism.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion_kernels::{frak_u0_diffusion, u_bar_beta, v_bar_beta, DiffusionKernels, MassEval};
use crate::error::{domain, Result};
use crate::levy_kernels::LevyKernels;

/// Base cases 1–6.
///
/// 1: Lévy killed at Exp(β); 2: Lévy killed at Exp(β) or on hitting 0;
/// 3: Lévy killed on hitting 0; 4–6: the same three for a diffusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum CaseId {
    Case1,
    Case2,
    Case3,
    Case4,
    Case5,
    Case6,
}

impl TryFrom<u8> for CaseId {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Ok(match v {
            1 => CaseId::Case1,
            2 => CaseId::Case2,
            3 => CaseId::Case3,
            4 => CaseId::Case4,
            5 => CaseId::Case5,
            6 => CaseId::Case6,
            _ => return Err(format!("case id {v} not in 1..=6")),
        })
    }
}

impl From<CaseId> for u8 {
    fn from(c: CaseId) -> u8 {
        c.index()
    }
}

impl CaseId {
    pub fn index(self) -> u8 {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 => 2,
            CaseId::Case3 => 3,
            CaseId::Case4 => 4,
            CaseId::Case5 => 5,
            CaseId::Case6 => 6,
        }
    }

    pub fn is_levy(self) -> bool {
        matches!(self, CaseId::Case1 | CaseId::Case2 | CaseId::Case3)
    }

    pub fn exp_killing(self) -> bool {
        matches!(self, CaseId::Case1 | CaseId::Case2 | CaseId::Case4 | CaseId::Case5)
    }

    pub fn killed_at_zero(self) -> bool {
        !matches!(self, CaseId::Case1 | CaseId::Case4)
    }

    /// Whether the lifetime is a pure Exp(β) clock (conservative motion).
    pub fn conservative(self) -> bool {
        matches!(self, CaseId::Case1 | CaseId::Case4)
    }
}

#[derive(Debug, Clone)]
pub enum Family {
    Levy(Arc<LevyKernels>),
    Diffusion(Arc<DiffusionKernels>),
}

/// A transient base process with kernels at any discount level.
#[derive(Debug, Clone)]
pub struct BaseProcess {
    pub case: CaseId,
    pub family: Family,
    /// Exponential killing rate (ignored by Cases 3 and 6).
    pub beta: f64,
}

impl BaseProcess {
    pub fn new(case: CaseId, family: Family, beta: f64) -> Result<Self> {
        match (&family, case.is_levy()) {
            (Family::Levy(_), true) | (Family::Diffusion(_), false) => {}
            _ => return domain(format!("case {} does not match the process family", case.index())),
        }
        if case.exp_killing() && !(beta > 0.0) {
            return domain(format!("case {} needs a killing rate beta > 0", case.index()));
        }
        let beta = if case.exp_killing() { beta } else { 0.0 };
        Ok(BaseProcess { case, family, beta })
    }

    pub fn levy(&self) -> Option<&Arc<LevyKernels>> {
        match &self.family {
            Family::Levy(k) => Some(k),
            _ => None,
        }
    }

    pub fn diffusion(&self) -> Option<&Arc<DiffusionKernels>> {
        match &self.family {
            Family::Diffusion(k) => Some(k),
            _ => None,
        }
    }

    pub fn in_state_space(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match self.case {
            CaseId::Case1 => true,
            CaseId::Case2 | CaseId::Case3 => x != 0.0,
            CaseId::Case4 => self.diffusion().is_some_and(|d| d.spec().contains(x)),
            CaseId::Case5 | CaseId::Case6 => x > 0.0 && self.diffusion().is_some_and(|d| d.spec().contains(x)),
        }
    }

    fn check(&self, x: f64) -> Result<()> {
        if self.in_state_space(x) {
            Ok(())
        } else {
            domain(format!("{x} is outside the state space of case {}", self.case.index()))
        }
    }

    /// Density of the reference measure at y (Lebesgue for Lévy cases, speed for diffusions).
    pub fn reference_density(&self, y: f64) -> Result<f64> {
        match &self.family {
            Family::Levy(_) => Ok(1.0),
            Family::Diffusion(d) => d.scale().speed_density(y),
        }
    }

    /// The p-potential density of the base process; `p = 0` gives the 0-potential.
    pub fn potential(&self, p: f64, x: f64, y: f64) -> Result<f64> {
        self.check(x)?;
        self.check(y)?;
        let b = self.beta + p;
        match (&self.family, self.case) {
            (Family::Levy(k), CaseId::Case1) => k.u_beta(b, x - y),
            (Family::Levy(k), CaseId::Case2) => k.v_beta(b, x, y),
            (Family::Levy(k), CaseId::Case3) if p == 0.0 => k.frak_u0(x, y),
            (Family::Levy(k), CaseId::Case3) => k.v_beta(p, x, y),
            (Family::Diffusion(d), CaseId::Case4) => u_bar_beta(&*d.factors(b)?, x, y),
            (Family::Diffusion(d), CaseId::Case5) => v_bar_beta(&*d.factors(b)?, x, y),
            (Family::Diffusion(d), CaseId::Case6) if p == 0.0 => frak_u0_diffusion(d.scale(), x, y),
            (Family::Diffusion(d), CaseId::Case6) => v_bar_beta(&*d.factors(p)?, x, y),
            _ => unreachable!("family/case mismatch rejected at construction"),
        }
    }

    /// ∫ u^p(x,z) m(dz), with a truncation tail estimate for diffusions.
    pub fn mass(&self, p: f64, x: f64) -> Result<MassEval> {
        self.check(x)?;
        if !(p > 0.0) && !self.case.exp_killing() {
            return domain("mass of the 0-potential diverges for cases 3 and 6");
        }
        let b = self.beta + p;
        let exact = |value: f64| -> Result<MassEval> { Ok(MassEval { value, tail_bound: 0.0 }) };
        match (&self.family, self.case) {
            (Family::Levy(_), CaseId::Case1) => exact(1.0 / b),
            (Family::Levy(k), CaseId::Case2) => exact((1.0 - k.u_beta(b, x)? / k.u_beta(b, 0.0)?) / b),
            (Family::Levy(k), CaseId::Case3) => exact((1.0 - k.u_beta(p, x)? / k.u_beta(p, 0.0)?) / p),
            (Family::Diffusion(d), CaseId::Case4) => d.factors(b)?.mass(x),
            (Family::Diffusion(d), CaseId::Case5) => d.factors(b)?.killed_mass(x),
            (Family::Diffusion(d), CaseId::Case6) => d.factors(p)?.killed_mass(x),
            _ => unreachable!("family/case mismatch rejected at construction"),
        }
    }
}
