//! Path simulation for the base processes, the rebirth mechanism, and
//! local-time estimation.
//!
//! The simulator streams every step to a [`StepObserver`], so estimators can
//! run without storing paths; [`PathBundle`] is the recorded form used for
//! replay and the shift operator.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::diffusion_kernels::{Coefficients, DiffusionSpec};
use crate::error::{domain, LabError, Result};
use crate::levy_kernels::LevyExponentSpec;
use crate::measure::MeasureSampler;
use crate::process::{BaseProcess, CaseId, Family};
use crate::rebirth_kernels::RebirthSpec;
use crate::rng::{counter_uniform, derive_seed, rng_from, stream_seed};

const MAX_STEPS: f64 = 1e9;
const STATE_GUARD: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HittingMode {
    /// Death only when a step lands on or across 0.
    Naive,
    /// Also kill with the Brownian-bridge crossing probability of each step.
    BridgeCorrected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_max: f64,
    /// Occupation-estimator bandwidth.
    pub epsilon: f64,
    pub seed: u64,
    pub max_cycles: u64,
    pub hitting_mode: HittingMode,
}

impl SimConfig {
    pub fn new(dt: f64, t_max: f64, epsilon: f64, seed: u64) -> Self {
        SimConfig { dt, t_max, epsilon, seed, max_cycles: 100_000, hitting_mode: HittingMode::BridgeCorrected }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.t_max > 0.0 && self.epsilon > 0.0) {
            return domain("dt, t_max and epsilon must be positive");
        }
        if self.dt > self.epsilon * self.epsilon * (1.0 + 1e-12) {
            return domain(format!("dt = {} exceeds epsilon² = {}", self.dt, self.epsilon * self.epsilon));
        }
        if self.t_max / self.dt > MAX_STEPS {
            return domain(format!("t_max/dt = {:.3e} exceeds the 1e9 step guard", self.t_max / self.dt));
        }
        if self.max_cycles == 0 {
            return domain("max_cycles must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeathCause {
    ExpClock,
    HitZero,
    Horizon,
}

impl DeathCause {
    fn code(self) -> u8 {
        match self {
            DeathCause::ExpClock => 0,
            DeathCause::HitZero => 1,
            DeathCause::Horizon => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => DeathCause::ExpClock,
            1 => DeathCause::HitZero,
            2 => DeathCause::Horizon,
            _ => return Err(LabError::Format(format!("unknown death cause {c}"))),
        })
    }
}

/// One lifetime ω_i. Step k runs from node k to node k+1; all steps have
/// length `dt` except the last, which has length `last_step`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    /// 1-based cycle index.
    pub id: u64,
    pub start_point: f64,
    pub start_time: f64,
    /// Index of step 0 within the original cycle (nonzero after a shift).
    pub step_offset: u64,
    pub dt: f64,
    pub n_steps: u64,
    pub last_step: f64,
    pub death_time: f64,
    pub cause: DeathCause,
    /// States at the nodes (`n_steps + 1` values), or empty when not recorded.
    pub states: Vec<f64>,
}

impl Cycle {
    pub fn lifetime(&self) -> f64 {
        self.death_time - self.start_time
    }

    pub fn step_length(&self, k: u64) -> f64 {
        if k + 1 == self.n_steps {
            self.last_step
        } else {
            self.dt
        }
    }

    pub fn node_time(&self, k: u64) -> f64 {
        if k >= self.n_steps {
            self.death_time
        } else {
            self.start_time + k as f64 * self.dt
        }
    }

    pub fn step_times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.node_time(k)).collect()
    }
}

/// A simulated rebirth path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub case: CaseId,
    pub spec_hash: String,
    pub seed: u64,
    /// Brownian variance rate, when the motion is Brownian.
    pub variance_rate: Option<f64>,
    pub dt: f64,
    pub t_max: f64,
    pub cycles: Vec<Cycle>,
    /// ζ₀ = 0 followed by the death times of completed cycles.
    pub zeta_partial_sums: Vec<f64>,
    pub exiled_at_cycle: Option<u64>,
    /// `max_cycles` was reached before the horizon.
    pub truncated: bool,
}

/// One simulated step, as delivered to observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub cycle_id: u64,
    /// Index within the original cycle.
    pub index: u64,
    pub t0: f64,
    pub t1: f64,
    pub h: f64,
    pub x0: f64,
    pub x1: f64,
}

pub trait StepObserver {
    fn start_cycle(&mut self, _cycle_id: u64, _start_point: f64, _start_time: f64) {}
    fn step(&mut self, step: &Step);
    fn end_cycle(&mut self, _cycle_id: u64, _death_time: f64, _cause: DeathCause) {}
}

/// Observer that ignores everything.
pub struct NoObserver;

impl StepObserver for NoObserver {
    fn step(&mut self, _step: &Step) {}
}

impl<A: StepObserver, B: StepObserver> StepObserver for (&mut A, &mut B) {
    fn start_cycle(&mut self, id: u64, x: f64, t: f64) {
        self.0.start_cycle(id, x, t);
        self.1.start_cycle(id, x, t);
    }
    fn step(&mut self, s: &Step) {
        self.0.step(s);
        self.1.step(s);
    }
    fn end_cycle(&mut self, id: u64, t: f64, c: DeathCause) {
        self.0.end_cycle(id, t, c);
        self.1.end_cycle(id, t, c);
    }
}

#[derive(Debug, Clone)]
enum Stepper {
    Brownian { var: f64 },
    Stable { alpha: f64, scale: f64 },
    Diffusion { spec: DiffusionSpec },
}

/// Symmetric α-stable variate with characteristic function e^{−|λ|^α}.
fn cms_symmetric<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    let v = std::f64::consts::PI * (rng.random::<f64>() - 0.5);
    let w: f64 = rng.sample(Exp1);
    (alpha * v).sin() / v.cos().powf(1.0 / alpha) * (((1.0 - alpha) * v).cos() / w).powf((1.0 - alpha) / alpha)
}

impl Stepper {
    fn for_process(base: &BaseProcess) -> Result<Self> {
        match &base.family {
            Family::Levy(k) => match k.spec() {
                LevyExponentSpec::Stable { alpha, scale } if *alpha == 2.0 => {
                    Ok(Stepper::Brownian { var: 2.0 * scale })
                }
                LevyExponentSpec::Stable { alpha, scale } => {
                    if !(*alpha > 1.0 && *alpha <= 2.0) {
                        return domain(format!("path simulation needs alpha in (1, 2], got {alpha}"));
                    }
                    Ok(Stepper::Stable { alpha: *alpha, scale: *scale })
                }
                LevyExponentSpec::Tabulated { .. } => {
                    Err(LabError::Unsupported("path simulation for tabulated Lévy exponents".into()))
                }
            },
            Family::Diffusion(d) => Ok(Stepper::Diffusion { spec: d.spec().clone() }),
        }
    }

    fn advance<R: Rng + ?Sized>(&self, x: f64, h: f64, rng: &mut R) -> f64 {
        match self {
            Stepper::Brownian { var } => x + (var * h).sqrt() * rng.sample::<f64, _>(StandardNormal),
            Stepper::Stable { alpha, scale } => x + (scale * h).powf(1.0 / alpha) * cms_symmetric(*alpha, rng),
            Stepper::Diffusion { spec } => {
                x + spec.c(x) * h + spec.a(x) * h.sqrt() * rng.sample::<f64, _>(StandardNormal)
            }
        }
    }

    /// Local diffusion variance rate, if the motion is continuous.
    fn local_variance(&self, x: f64) -> Option<f64> {
        match self {
            Stepper::Brownian { var } => Some(*var),
            Stepper::Stable { .. } => None,
            Stepper::Diffusion { spec } => Some(spec.a(x).powi(2)),
        }
    }

    fn variance_rate(&self) -> Option<f64> {
        match self {
            Stepper::Brownian { var } => Some(*var),
            _ => None,
        }
    }

    /// Typical displacement over one step of length dt.
    fn typical_step(&self, dt: f64, x: f64) -> f64 {
        match self {
            Stepper::Brownian { var } => (var * dt).sqrt(),
            Stepper::Stable { alpha, scale } => (scale * dt).powf(1.0 / alpha),
            Stepper::Diffusion { spec } => spec.a(x).abs() * dt.sqrt(),
        }
    }
}

/// Identifies the motion a bundle was simulated from; stored in every bundle.
pub fn spec_hash_of(base: &BaseProcess) -> String {
    match &base.family {
        Family::Levy(k) => k.spec_hash().to_string(),
        Family::Diffusion(d) => {
            use sha2::{Digest, Sha256};
            let coef = match &d.spec().coefficients {
                Coefficients::Custom { .. } => "custom".to_string(),
                c => serde_json::to_string(c).expect("coefficients serialize"),
            };
            let s = format!("{coef}|{}|{}", d.spec().x_lo, d.spec().x_hi);
            hex::encode(Sha256::digest(s.as_bytes()))
        }
    }
}

/// Bandwidth heuristic for α-stable motion: ten typical step displacements.
pub fn default_epsilon(base: &BaseProcess, dt: f64) -> Result<f64> {
    let st = Stepper::for_process(base)?;
    Ok(match st {
        Stepper::Stable { .. } => 10.0 * st.typical_step(dt, 0.0),
        _ => (2.0 * st.typical_step(dt, 0.0)).max(dt.sqrt()),
    })
}

/// Simulator for one base process under a fixed configuration.
#[derive(Debug, Clone)]
pub struct Simulator {
    base: Arc<BaseProcess>,
    stepper: Stepper,
    cfg: SimConfig,
    spec_hash: String,
    reuse_first_cycle_seed: bool,
}

struct CycleRun {
    cycle: Cycle,
}

impl Simulator {
    pub fn new(base: Arc<BaseProcess>, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        let stepper = Stepper::for_process(&base)?;
        let spec_hash = spec_hash_of(&base);
        Ok(Simulator { base, stepper, cfg, spec_hash, reuse_first_cycle_seed: false })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn base(&self) -> &Arc<BaseProcess> {
        &self.base
    }

    pub fn variance_rate(&self) -> Option<f64> {
        self.stepper.variance_rate()
    }

    /// Negative-control hook: every cycle reuses the random stream of cycle 1.
    pub fn with_reused_cycle_seed(mut self) -> Self {
        self.reuse_first_cycle_seed = true;
        self
    }

    pub fn typical_step(&self, x: f64) -> f64 {
        self.stepper.typical_step(self.cfg.dt, x)
    }

    fn cycle_seed(&self, seed: u64, id: u64) -> u64 {
        stream_seed(seed, if self.reuse_first_cycle_seed { 1 } else { id })
    }

    fn run_cycle<O: StepObserver>(
        &self,
        seed: u64,
        id: u64,
        start_point: f64,
        start_time: f64,
        record: bool,
        obs: &mut O,
    ) -> Result<CycleRun> {
        let case = self.base.case;
        let dt = self.cfg.dt;
        let mut rng = rng_from(self.cycle_seed(seed, id));
        let clock = if case.exp_killing() {
            let e: f64 = rng.sample(Exp1);
            start_time + e / self.base.beta
        } else {
            f64::INFINITY
        };
        let (end, mut cause) = if clock < self.cfg.t_max {
            (clock, DeathCause::ExpClock)
        } else {
            (self.cfg.t_max, DeathCause::Horizon)
        };
        let kill_zero = case.killed_at_zero();
        let bridge = self.cfg.hitting_mode == HittingMode::BridgeCorrected;
        let mut states = Vec::new();
        if record {
            states.push(start_point);
        }
        obs.start_cycle(id, start_point, start_time);
        let mut x = start_point;
        let mut k: u64 = 0;
        let (death_time, last_step);
        loop {
            let t0 = start_time + k as f64 * dt;
            let t_next = start_time + (k + 1) as f64 * dt;
            let final_step = t_next >= end;
            let (t1, h) = if final_step { (end, end - t0) } else { (t_next, dt) };
            let mut x1 = self.stepper.advance(x, h, &mut rng);
            if !x1.is_finite() || x1.abs() > STATE_GUARD {
                return Err(LabError::Numerical(format!(
                    "path blow-up in cycle {id} at step {k} (t = {t0:.6}): state {x} -> {x1}, dt = {h:.3e}"
                )));
            }
            let mut hit = false;
            if kill_zero {
                if x1 == 0.0 || x1.signum() != x.signum() {
                    hit = true;
                } else if bridge {
                    if let Some(v) = self.stepper.local_variance(x) {
                        let p = (-2.0 * x * x1 / (v * h)).exp();
                        hit = rng.random::<f64>() < p;
                    }
                }
            }
            if hit {
                x1 = 0.0;
            }
            obs.step(&Step { cycle_id: id, index: k, t0, t1, h, x0: x, x1 });
            if record {
                states.push(x1);
            }
            x = x1;
            k += 1;
            if hit {
                cause = DeathCause::HitZero;
                death_time = t1;
                last_step = h;
                break;
            }
            if final_step {
                death_time = end;
                last_step = h;
                break;
            }
        }
        obs.end_cycle(id, death_time, cause);
        Ok(CycleRun {
            cycle: Cycle {
                id,
                start_point,
                start_time,
                step_offset: 0,
                dt,
                n_steps: k,
                last_step,
                death_time,
                cause,
                states,
            },
        })
    }

    fn check_start(&self, start: f64) -> Result<()> {
        if !self.base.in_state_space(start) {
            return domain(format!("start point {start} is outside the state space of case {}", self.base.case.index()));
        }
        Ok(())
    }

    fn empty_bundle(&self) -> PathBundle {
        PathBundle {
            case: self.base.case,
            spec_hash: self.spec_hash.clone(),
            seed: self.cfg.seed,
            variance_rate: self.stepper.variance_rate(),
            dt: self.cfg.dt,
            t_max: self.cfg.t_max,
            cycles: Vec::new(),
            zeta_partial_sums: vec![0.0],
            exiled_at_cycle: None,
            truncated: false,
        }
    }

    /// Single killed path (no rebirth) with states recorded.
    pub fn simulate_base_path(&self, start: f64) -> Result<PathBundle> {
        self.simulate_base_observed(start, true, &mut NoObserver)
    }

    pub fn simulate_base_observed<O: StepObserver>(&self, start: f64, record: bool, obs: &mut O) -> Result<PathBundle> {
        self.check_start(start)?;
        let mut b = self.empty_bundle();
        let run = self.run_cycle(self.cfg.seed, 1, start, 0.0, record, obs)?;
        if run.cycle.cause != DeathCause::Horizon {
            b.zeta_partial_sums.push(run.cycle.death_time);
        }
        b.cycles.push(run.cycle);
        Ok(b)
    }

    /// Rebirth path with states recorded.
    pub fn simulate_rebirth(&self, rebirth: &RebirthSpec, start: f64) -> Result<PathBundle> {
        self.simulate_rebirth_observed(rebirth, start, true, &mut NoObserver)
    }

    /// Rebirth path streamed to `obs`; with `record = false` the cycles carry no states.
    pub fn simulate_rebirth_observed<O: StepObserver>(
        &self,
        rebirth: &RebirthSpec,
        start: f64,
        record: bool,
        obs: &mut O,
    ) -> Result<PathBundle> {
        self.check_start(start)?;
        rebirth.validate(&self.base)?;
        let sampler = MeasureSampler::new(rebirth.measure())?;
        let exile_p = rebirth.exile_probability();
        let mut rrng = rng_from(derive_seed(self.cfg.seed, &["rebirth"]));
        let mut b = self.empty_bundle();
        let mut x = start;
        let mut t = 0.0;
        let mut id = 1;
        loop {
            let run = self.run_cycle(self.cfg.seed, id, x, t, record, obs)?;
            let c = run.cycle;
            let done = c.cause == DeathCause::Horizon;
            t = c.death_time;
            if !done {
                b.zeta_partial_sums.push(t);
            }
            b.cycles.push(c);
            if done {
                break;
            }
            if exile_p > 0.0 && rrng.random::<f64>() < exile_p {
                b.exiled_at_cycle = Some(id + 1);
                break;
            }
            if id >= self.cfg.max_cycles {
                b.truncated = true;
                break;
            }
            x = sampler.sample(&mut rrng);
            id += 1;
        }
        Ok(b)
    }
}

pub fn simulate_base_path(base: Arc<BaseProcess>, start: f64, cfg: SimConfig) -> Result<PathBundle> {
    Simulator::new(base, cfg)?.simulate_base_path(start)
}

pub fn simulate_rebirth(base: Arc<BaseProcess>, rebirth: &RebirthSpec, start: f64, cfg: SimConfig) -> Result<PathBundle> {
    Simulator::new(base, cfg)?.simulate_rebirth(rebirth, start)
}

impl PathBundle {
    pub fn n_completed(&self) -> usize {
        self.zeta_partial_sums.len() - 1
    }

    /// End of the simulated time range.
    pub fn end_time(&self) -> f64 {
        self.cycles.last().map_or(0.0, |c| c.death_time)
    }

    pub fn is_recorded(&self) -> bool {
        self.cycles.iter().all(|c| c.states.len() as u64 == c.n_steps + 1)
    }

    /// N_t = min{j : t < ζ_j}; `None` if t lies beyond the simulated cycles.
    pub fn cycle_index_at(&self, t: f64) -> Option<u64> {
        self.cycles.iter().find(|c| t < c.death_time).map(|c| c.id)
    }

    /// Stream the recorded steps to an observer.
    pub fn replay<O: StepObserver>(&self, obs: &mut O) -> Result<()> {
        if !self.is_recorded() {
            return Err(LabError::Unsupported("replay needs a bundle with recorded states".into()));
        }
        for c in &self.cycles {
            obs.start_cycle(c.id, c.start_point, c.start_time);
            for k in 0..c.n_steps {
                let i = k as usize;
                obs.step(&Step {
                    cycle_id: c.id,
                    index: c.step_offset + k,
                    t0: c.node_time(k),
                    t1: c.node_time(k + 1),
                    h: c.step_length(k),
                    x0: c.states[i],
                    x1: c.states[i + 1],
                });
            }
            obs.end_cycle(c.id, c.death_time, c.cause);
        }
        Ok(())
    }

    /// Time of node `k` of cycle position `pos`.
    pub fn node_time(&self, pos: usize, k: u64) -> f64 {
        self.cycles[pos].node_time(k)
    }

    /// θ_s for s at node `k` of the cycle at position `pos`: the remainder of
    /// that cycle followed by the later cycles, with time origin moved to s.
    pub fn shifted(&self, pos: usize, k: u64) -> Result<PathBundle> {
        if !self.is_recorded() {
            return Err(LabError::Unsupported("shift needs a bundle with recorded states".into()));
        }
        let c = self.cycles.get(pos).ok_or_else(|| LabError::Domain(format!("no cycle at position {pos}")))?;
        if k >= c.n_steps {
            return domain(format!("split node {k} must precede the end of the cycle ({} steps)", c.n_steps));
        }
        let s = c.node_time(k);
        let mut cycles = Vec::with_capacity(self.cycles.len() - pos);
        let ku = k as usize;
        cycles.push(Cycle {
            id: c.id,
            start_point: c.states[ku],
            start_time: 0.0,
            step_offset: c.step_offset + k,
            dt: c.dt,
            n_steps: c.n_steps - k,
            last_step: c.last_step,
            death_time: c.death_time - s,
            cause: c.cause,
            states: c.states[ku..].to_vec(),
        });
        for c in &self.cycles[pos + 1..] {
            let mut d = c.clone();
            d.start_time -= s;
            d.death_time -= s;
            cycles.push(d);
        }
        let mut zeta = vec![0.0];
        zeta.extend(self.zeta_partial_sums.iter().filter(|&&z| z > s).map(|z| z - s));
        Ok(PathBundle {
            cycles,
            zeta_partial_sums: zeta,
            t_max: self.t_max - s,
            spec_hash: self.spec_hash.clone(),
            ..*self
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(b"RLPB", 1);
        e.u8(self.case.index());
        e.str(&self.spec_hash);
        e.u64(self.seed);
        e.f64(self.variance_rate.unwrap_or(f64::NAN));
        e.f64(self.dt);
        e.f64(self.t_max);
        e.u8(self.truncated as u8);
        e.u64(self.exiled_at_cycle.unwrap_or(0));
        e.f64s(&self.zeta_partial_sums);
        e.u64(self.cycles.len() as u64);
        for c in &self.cycles {
            e.u64(c.id);
            e.f64(c.start_point);
            e.f64(c.start_time);
            e.u64(c.step_offset);
            e.f64(c.dt);
            e.u64(c.n_steps);
            e.f64(c.last_step);
            e.f64(c.death_time);
            e.u8(c.cause.code());
            e.f64s(&c.states);
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::new(bytes, b"RLPB", 1, "path bundle")?;
        let case = CaseId::try_from(d.u8()?).map_err(LabError::Format)?;
        let spec_hash = d.str()?;
        let seed = d.u64()?;
        let vr = d.f64()?;
        let dt = d.f64()?;
        let t_max = d.f64()?;
        let truncated = d.u8()? != 0;
        let exiled = d.u64()?;
        let zeta_partial_sums = d.f64s()?;
        let n = d.u64()?;
        let mut cycles = Vec::new();
        for _ in 0..n {
            cycles.push(Cycle {
                id: d.u64()?,
                start_point: d.f64()?,
                start_time: d.f64()?,
                step_offset: d.u64()?,
                dt: d.f64()?,
                n_steps: d.u64()?,
                last_step: d.f64()?,
                death_time: d.f64()?,
                cause: DeathCause::from_code(d.u8()?)?,
                states: d.f64s()?,
            });
        }
        d.finish()?;
        Ok(PathBundle {
            case,
            spec_hash,
            seed,
            variance_rate: (!vr.is_nan()).then_some(vr),
            dt,
            t_max,
            cycles,
            zeta_partial_sums,
            exiled_at_cycle: (exiled != 0).then_some(exiled),
            truncated,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// CSV of (cycle, time, state) rows for plotting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "cycle,time,state")?;
        for c in &self.cycles {
            for (k, x) in c.states.iter().enumerate() {
                writeln!(w, "{},{:.12e},{:.12e}", c.id, c.node_time(k as u64), x)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact-sum accumulator: values are held as integer multiples of 2⁻⁶⁴, so
/// sums are associative and splitting a sum never changes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct Fixed(pub i128);

const FIXED_SCALE: f64 = 18_446_744_073_709_551_616.0;

impl Fixed {
    pub fn from_f64(x: f64) -> Fixed {
        Fixed((x * FIXED_SCALE).round() as i128)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 / FIXED_SCALE
    }
}

impl std::ops::Add for Fixed {
    type Output = Fixed;
    fn add(self, o: Fixed) -> Fixed {
        Fixed(self.0 + o.0)
    }
}

impl std::ops::AddAssign for Fixed {
    fn add_assign(&mut self, o: Fixed) {
        self.0 += o.0;
    }
}

impl std::ops::Sub for Fixed {
    type Output = Fixed;
    fn sub(self, o: Fixed) -> Fixed {
        Fixed(self.0 - o.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LocalTimeMethod {
    /// (1/2ε)∫1{|X_s − y| ≤ ε}ds over left endpoints, divided by the reference density.
    Occupation { epsilon: f64 },
    /// Exact Brownian-bridge local time of every step (Brownian motion only).
    Bridge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeRequest {
    pub y_grid: Vec<f64>,
    /// Extra time marks; every ζ_n within the bundle is added automatically.
    pub t_marks: Vec<f64>,
    pub method: LocalTimeMethod,
    /// Discount rates p for ∫e^{−ps}dL̂.
    pub discounts: Vec<f64>,
}

impl LocalTimeRequest {
    pub fn new(y_grid: Vec<f64>, method: LocalTimeMethod) -> Self {
        LocalTimeRequest { y_grid, t_marks: Vec::new(), method, discounts: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Full(CaseId),
    Partial(CaseId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalTimeEstimate {
    pub y_grid: Vec<f64>,
    pub t_marks: Vec<f64>,
    /// `values[j][i]` = L̂^{y_i} at `t_marks[j]`.
    pub values: Vec<Vec<f64>>,
    /// `per_cycle_values[c][j][i]`: contribution of cycle c.
    pub per_cycle_values: Vec<Vec<Vec<f64>>>,
    /// Exact accumulators behind `values`.
    pub fixed_values: Vec<Vec<Fixed>>,
    /// Whole-cycle totals, `cycle_totals[c][i]`.
    pub cycle_totals: Vec<Vec<f64>>,
    /// L̂ at the end of the bundle.
    pub final_values: Vec<f64>,
    pub fixed_final: Vec<Fixed>,
    pub epsilon: Option<f64>,
    pub method: LocalTimeMethod,
    pub normalization: Normalization,
    pub discounts: Vec<f64>,
    /// `discounted[d][i]` = Σ e^{−p_d t_mid} ΔL̂^{y_i}.
    pub discounted: Vec<Vec<f64>>,
    /// Time at which the bundle stops (horizon, exile or truncation).
    pub end_time: f64,
    /// True when the path was still alive in S at the end.
    pub open_ended: bool,
}

#[derive(Debug, Clone)]
struct CycleAcc {
    running: Vec<Fixed>,
}

/// Streaming local-time estimator; feed it steps, then call [`finish`](Self::finish).
#[derive(Debug, Clone)]
pub struct LocalTimeAccumulator {
    req: LocalTimeRequest,
    weights: Vec<f64>,
    variance: f64,
    seed: u64,
    marks: Vec<f64>,
    next_mark: usize,
    /// (mark index, cycle position, snapshot of that cycle).
    snapshots: Vec<(usize, usize, Vec<Fixed>)>,
    cycles: Vec<CycleAcc>,
    zeta: Vec<f64>,
    discounted: Vec<Vec<f64>>,
    scratch: Vec<(usize, f64)>,
}

impl LocalTimeAccumulator {
    /// `variance_rate` is required by the bridge method; `seed` keys its uniforms.
    pub fn new(base: &BaseProcess, req: LocalTimeRequest, variance_rate: Option<f64>, seed: u64) -> Result<Self> {
        if req.y_grid.is_empty() {
            return domain("local time estimate needs a nonempty y grid");
        }
        if req.y_grid.windows(2).any(|w| w[1] <= w[0]) {
            return domain("y grid must be strictly increasing");
        }
        if req.discounts.iter().any(|p| !(*p > 0.0)) {
            return domain("discount rates must be positive");
        }
        let (weights, variance) = match req.method {
            LocalTimeMethod::Occupation { epsilon } => {
                if !(epsilon > 0.0) {
                    return domain("epsilon must be positive");
                }
                let w = req
                    .y_grid
                    .iter()
                    .map(|&y| Ok(1.0 / (2.0 * epsilon * base.reference_density(y)?)))
                    .collect::<Result<Vec<f64>>>()?;
                (w, 0.0)
            }
            LocalTimeMethod::Bridge => {
                let Some(v) = variance_rate.filter(|_| base.case.is_levy()) else {
                    return Err(LabError::Unsupported("bridge local time needs Brownian Lévy motion".into()));
                };
                (vec![1.0; req.y_grid.len()], v)
            }
        };
        let mut marks = req.t_marks.clone();
        marks.sort_by(f64::total_cmp);
        marks.dedup();
        let nd = req.discounts.len();
        let ny = req.y_grid.len();
        Ok(LocalTimeAccumulator {
            req,
            weights,
            variance,
            seed,
            marks,
            next_mark: 0,
            snapshots: Vec::new(),
            cycles: Vec::new(),
            zeta: Vec::new(),
            discounted: vec![vec![0.0; ny]; nd],
            scratch: Vec::new(),
        })
    }

    /// Accumulator matched to a recorded bundle.
    pub fn for_bundle(base: &BaseProcess, bundle: &PathBundle, req: LocalTimeRequest) -> Result<Self> {
        if base.case != bundle.case {
            return domain("bundle case does not match the base process");
        }
        Self::new(base, req, bundle.variance_rate, bundle.seed)
    }

    fn range(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let g = &self.req.y_grid;
        g.partition_point(|&y| y < lo)..g.partition_point(|&y| y <= hi)
    }

    fn increments(&mut self, s: &Step) {
        self.scratch.clear();
        match self.req.method {
            LocalTimeMethod::Occupation { epsilon } => {
                for i in self.range(s.x0 - epsilon, s.x0 + epsilon) {
                    self.scratch.push((i, s.h * self.weights[i]));
                }
            }
            LocalTimeMethod::Bridge => {
                let v = self.variance;
                let reach = (20.0 * v * s.h).sqrt();
                let (lo, hi) = (s.x0.min(s.x1) - reach, s.x0.max(s.x1) + reach);
                let d = s.x1 - s.x0;
                for i in self.range(lo, hi) {
                    let y = self.req.y_grid[i];
                    let a = (s.x0 - y).abs() + (s.x1 - y).abs();
                    let u = counter_uniform(self.seed, s.cycle_id, s.index, y.to_bits());
                    let r2 = d * d - 2.0 * v * s.h * u.ln();
                    if r2 > a * a {
                        self.scratch.push((i, (r2.sqrt() - a) / v));
                    }
                }
            }
        }
    }
}

impl StepObserver for LocalTimeAccumulator {
    fn start_cycle(&mut self, _id: u64, _x: f64, _t: f64) {
        self.cycles.push(CycleAcc { running: vec![Fixed::default(); self.req.y_grid.len()] });
    }

    fn step(&mut self, s: &Step) {
        let pos = self.cycles.len() - 1;
        while self.next_mark < self.marks.len() && self.marks[self.next_mark] < s.t1 {
            let snap = self.cycles[pos].running.clone();
            self.snapshots.push((self.next_mark, pos, snap));
            self.next_mark += 1;
        }
        self.increments(s);
        let tm = s.t0 + 0.5 * s.h;
        for &(i, l) in &self.scratch {
            self.cycles[pos].running[i] += Fixed::from_f64(l);
        }
        if !self.scratch.is_empty() {
            for (d, p) in self.req.discounts.iter().enumerate() {
                let disc = (-p * tm).exp();
                for &(i, l) in &self.scratch {
                    self.discounted[d][i] += disc * l;
                }
            }
        }
    }

    fn end_cycle(&mut self, _id: u64, death_time: f64, cause: DeathCause) {
        if cause != DeathCause::Horizon {
            self.zeta.push(death_time);
        }
    }
}

impl LocalTimeAccumulator {
    pub fn finish(mut self, bundle: &PathBundle, normalization: Normalization) -> LocalTimeEstimate {
        let ny = self.req.y_grid.len();
        let nc = self.cycles.len();
        let last = nc.saturating_sub(1);
        while self.next_mark < self.marks.len() {
            let snap = self.cycles.last().map_or(vec![Fixed::default(); ny], |c| c.running.clone());
            self.snapshots.push((self.next_mark, last, snap));
            self.next_mark += 1;
        }
        // (time, cycle position, snapshot of that cycle)
        let mut rows: Vec<(f64, usize, Vec<Fixed>)> =
            self.snapshots.into_iter().map(|(j, pos, s)| (self.marks[j], pos, s)).collect();
        for (n, &z) in self.zeta.iter().enumerate() {
            rows.push((z, n, self.cycles[n].running.clone()));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        rows.dedup_by(|a, b| a.0 == b.0);
        let mut t_marks = Vec::with_capacity(rows.len());
        let mut values = Vec::with_capacity(rows.len());
        let mut fixed_values = Vec::with_capacity(rows.len());
        let mut per_cycle_values = vec![Vec::with_capacity(rows.len()); nc];
        for (t, pos, snap) in &rows {
            let mut tot = vec![Fixed::default(); ny];
            for (c, acc) in self.cycles.iter().enumerate() {
                let part: &[Fixed] = match c.cmp(pos) {
                    std::cmp::Ordering::Less => &acc.running,
                    std::cmp::Ordering::Equal => snap,
                    std::cmp::Ordering::Greater => &[],
                };
                let mut row = vec![0.0; ny];
                for (i, v) in part.iter().enumerate() {
                    tot[i] += *v;
                    row[i] = v.to_f64();
                }
                per_cycle_values[c].push(row);
            }
            t_marks.push(*t);
            values.push(tot.iter().map(|v| v.to_f64()).collect());
            fixed_values.push(tot);
        }
        let mut fixed_final = vec![Fixed::default(); ny];
        for c in &self.cycles {
            for (i, v) in c.running.iter().enumerate() {
                fixed_final[i] += *v;
            }
        }
        let open_ended = bundle.exiled_at_cycle.is_none()
            && (bundle.truncated || bundle.cycles.last().is_some_and(|c| c.cause == DeathCause::Horizon));
        let bundle_end = bundle.end_time();
        let epsilon = match self.req.method {
            LocalTimeMethod::Occupation { epsilon } => Some(epsilon),
            LocalTimeMethod::Bridge => None,
        };
        LocalTimeEstimate {
            y_grid: self.req.y_grid.clone(),
            t_marks,
            values,
            per_cycle_values,
            fixed_values,
            cycle_totals: self.cycles.iter().map(|c| c.running.iter().map(|v| v.to_f64()).collect()).collect(),
            final_values: fixed_final.iter().map(|v| v.to_f64()).collect(),
            fixed_final,
            epsilon,
            method: self.req.method,
            normalization,
            discounts: self.req.discounts.clone(),
            discounted: self.discounted,
            end_time: bundle_end,
            open_ended,
        }
    }
}

/// Run the estimator over a recorded bundle.
pub fn estimate_local_time(
    base: &BaseProcess,
    bundle: &PathBundle,
    req: LocalTimeRequest,
    normalization: Normalization,
) -> Result<LocalTimeEstimate> {
    let mut acc = LocalTimeAccumulator::for_bundle(base, bundle, req)?;
    bundle.replay(&mut acc)?;
    Ok(acc.finish(bundle, normalization))
}

/// Minimum bandwidth for the occupation estimator: two typical step displacements.
pub fn check_bandwidth(sim: &Simulator, epsilon: f64, at: f64) -> Result<()> {
    let need = 2.0 * sim.typical_step(at);
    if epsilon < need * (1.0 - 1e-9) {
        return domain(format!("epsilon {epsilon} is below two typical step displacements ({need:.3e})"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceValue {
    pub value: f64,
    /// e^{−p·end}: multiply by a bound on the remaining discounted local time
    /// to bound the truncation bias (0 when the path ended in the cemetery or in exile).
    pub horizon_discount: f64,
}

/// ∫₀^∞ e^{−ps} dL̂^y_s for a discount rate registered in the request.
pub fn laplace_functional(est: &LocalTimeEstimate, p: f64, y_index: usize) -> Result<LaplaceValue> {
    let d = est
        .discounts
        .iter()
        .position(|&q| q == p)
        .ok_or_else(|| LabError::Domain(format!("discount rate {p} was not requested")))?;
    if y_index >= est.y_grid.len() {
        return domain(format!("level index {y_index} out of range"));
    }
    Ok(LaplaceValue {
        value: est.discounted[d][y_index],
        horizon_discount: if est.open_ended { (-p * est.end_time).exp() } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levy_kernels::LevyKernels;

    fn bm_case(case: CaseId) -> Arc<BaseProcess> {
        let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
        Arc::new(BaseProcess::new(case, Family::Levy(k), 1.0).unwrap())
    }

    #[test]
    fn cms_alpha_two_is_gaussian_with_variance_two() {
        let mut rng = rng_from(5);
        let n = 100_000;
        let v: f64 = (0..n).map(|_| cms_symmetric(2.0, &mut rng).powi(2)).sum::<f64>() / n as f64;
        assert!((v - 2.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn fixed_sums_are_exact() {
        let a = Fixed::from_f64(0.1);
        let b = Fixed::from_f64(0.2);
        assert_eq!((a + b) - b, a);
        assert!(((a + b).to_f64() - 0.3).abs() < 1e-16);
    }

    #[test]
    fn cycle_bookkeeping() {
        let base = bm_case(CaseId::Case1);
        let cfg = SimConfig::new(1e-3, 10.0, 0.05, 3);
        let b = simulate_rebirth(base, &RebirthSpec::full(crate::measure::Measure::dirac(0.0)), 0.0, cfg).unwrap();
        assert!(b.zeta_partial_sums.windows(2).all(|w| w[1] > w[0]));
        for (c, w) in b.cycles.iter().zip(b.zeta_partial_sums.windows(2)) {
            assert_eq!(c.start_time, w[0]);
            assert_eq!(c.death_time, w[1]);
            assert_eq!(c.states.len() as u64, c.n_steps + 1);
        }
        assert_eq!(b.end_time(), 10.0);
        assert_eq!(b.cycle_index_at(0.0), Some(1));
        let back = PathBundle::from_bytes(&b.to_bytes()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn killed_at_zero_paths_end_at_zero() {
        let base = bm_case(CaseId::Case3);
        let cfg = SimConfig::new(1e-3, 50.0, 0.05, 9);
        let b = simulate_base_path(base, 0.3, cfg).unwrap();
        let c = &b.cycles[0];
        assert!(matches!(c.cause, DeathCause::HitZero | DeathCause::Horizon));
        if c.cause == DeathCause::HitZero {
            assert_eq!(*c.states.last().unwrap(), 0.0);
        }
    }
}
