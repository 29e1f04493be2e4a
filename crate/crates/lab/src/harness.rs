//! Experiment orchestration: declarative TOML configs in, verdict JSON, CSV
//! tables and a run manifest out.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion_kernels::{DiffusionKernels, DiffusionSpec};
use crate::error::{LabError, Result};
use crate::levy_kernels::{LevyExponentSpec, LevyKernels};
use crate::measure::Measure;
use crate::path_engine::{spec_hash_of, LocalTimeEstimate, PathBundle};
use crate::process::{BaseProcess, CaseId, Family};
use crate::rebirth_kernels::{RebirthKernel, RebirthSpec};
use crate::verify::{self, *};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKERS_ENV: &str = "REBIRTH_LAB_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    Csv,
    Both,
}

impl OutputFormat {
    fn json(self) -> bool {
        matches!(self, OutputFormat::Json | OutputFormat::Both)
    }
    fn csv(self) -> bool {
        matches!(self, OutputFormat::Csv | OutputFormat::Both)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessConfig {
    #[serde(default = "default_case")]
    pub case: CaseId,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Lévy exponent for cases 1–3 (Brownian when omitted).
    #[serde(default)]
    pub levy: Option<LevyExponentSpec>,
    /// Required for cases 4–6.
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
}

fn default_case() -> CaseId {
    CaseId::Case1
}
fn default_beta() -> f64 {
    1.0
}

impl Default for ProcessConfig {
    fn default() -> Self {
        ProcessConfig { case: CaseId::Case1, beta: 1.0, levy: None, diffusion: None }
    }
}

impl ProcessConfig {
    pub fn build(&self) -> Result<Arc<BaseProcess>> {
        let family = if self.case.is_levy() {
            if self.diffusion.is_some() {
                return Err(LabError::Config(format!("process.diffusion given for Levy case {}", self.case.index())));
            }
            let spec = self.levy.clone().unwrap_or_else(LevyExponentSpec::brownian);
            Family::Levy(Arc::new(LevyKernels::new(spec)?))
        } else {
            if self.levy.is_some() {
                return Err(LabError::Config(format!("process.levy given for diffusion case {}", self.case.index())));
            }
            let Some(spec) = self.diffusion.clone() else {
                return Err(LabError::Config(format!("case {} needs a process.diffusion block", self.case.index())));
            };
            Family::Diffusion(Arc::new(DiffusionKernels::new(spec)?))
        };
        Ok(Arc::new(BaseProcess::new(self.case, family, self.beta)?))
    }
}

/// Simulation defaults applied to every check that has the matching parameter.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub dt: Option<f64>,
    pub t_max: Option<f64>,
    pub epsilon: Option<f64>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckEntry {
    pub id: String,
    /// Turn band/trend outcomes into hard verdicts.
    #[serde(default)]
    pub promote: bool,
    /// Replaces the master seed for this check only.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub params: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub format: OutputFormat,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub process: ProcessConfig,
    #[serde(default)]
    pub rebirth: Option<RebirthSpec>,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub checks: Vec<CheckEntry>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

/// A validated check ready to run.
#[derive(Debug, Clone)]
pub struct PlannedCheck {
    pub id: String,
    pub seed: Option<u64>,
    pub params: Value,
}

/// A parsed and validated configuration.
#[derive(Debug, Clone)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub checks: Vec<PlannedCheck>,
    pub base: Arc<BaseProcess>,
}

fn to_json(v: &impl Serialize) -> Value {
    serde_json::to_value(v).expect("parameters serialize")
}

/// Default parameters of a check as JSON.
pub fn default_params(id: &str) -> Option<Value> {
    Some(match id {
        KERNEL_GOLDEN_SUITE => to_json(&GoldenParams::default()),
        KERNEL_POSITIVE_DEFINITE => to_json(&PositiveDefiniteParams::default()),
        SCALAR_IDENTITIES => to_json(&ScalarParams::default()),
        EQ_2_2_NORMALIZATION => to_json(&NormalizationParams::for_kind(NormalizationKind::Base)),
        EQ_INT3_NORMALIZATION => to_json(&NormalizationParams::for_kind(NormalizationKind::Rebirth)),
        EQ_6AZ_PARTIAL_NORMALIZATION => to_json(&NormalizationParams::for_kind(NormalizationKind::Partial)),
        DECOMPOSITION_EXACTNESS => to_json(&DecompositionParams::default()),
        EISENBAUM_ISOMORPHISM => to_json(&EisenbaumParams::default()),
        CONDITIONAL_INDEPENDENCE => to_json(&ConditionalIndependenceParams::default()),
        COMBINED_IDENTITY => to_json(&CombinedParams::default()),
        THM36_UNIFORM_MODULUS => to_json(&UniformModulusParams::default()),
        THM31_LOCAL_MODULUS => to_json(&LocalModulusParams::default()),
        THM41_LOCALTIME_MODULUS => to_json(&LocalTimeModulusParams::default()),
        _ => return None,
    })
}

fn typed<T: DeserializeOwned>(id: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| LabError::Config(format!("checks.{id}.params: {e}")))
}

/// Deserialize into the check's parameter type to surface unknown keys and bad values.
fn validate_params(id: &str, v: &Value) -> Result<()> {
    match id {
        KERNEL_GOLDEN_SUITE => typed::<GoldenParams>(id, v).map(drop),
        KERNEL_POSITIVE_DEFINITE => typed::<PositiveDefiniteParams>(id, v).map(drop),
        SCALAR_IDENTITIES => typed::<ScalarParams>(id, v).map(drop),
        EQ_2_2_NORMALIZATION | EQ_INT3_NORMALIZATION | EQ_6AZ_PARTIAL_NORMALIZATION => typed::<NormalizationParams>(id, v).map(drop),
        DECOMPOSITION_EXACTNESS => typed::<DecompositionParams>(id, v).map(drop),
        EISENBAUM_ISOMORPHISM => typed::<EisenbaumParams>(id, v).map(drop),
        CONDITIONAL_INDEPENDENCE => typed::<ConditionalIndependenceParams>(id, v).map(drop),
        COMBINED_IDENTITY => typed::<CombinedParams>(id, v).map(drop),
        THM36_UNIFORM_MODULUS => typed::<UniformModulusParams>(id, v).map(drop),
        THM31_LOCAL_MODULUS => typed::<LocalModulusParams>(id, v).map(drop),
        THM41_LOCALTIME_MODULUS => typed::<LocalTimeModulusParams>(id, v).map(drop),
        _ => Err(LabError::Config(format!("unknown check id `{id}`"))),
    }
}

fn uses_partial_rebirth(id: &str) -> bool {
    id == EQ_6AZ_PARTIAL_NORMALIZATION
}

/// Defaults, then the sim and rebirth blocks, then the check's own overrides.
fn resolve_params(cfg: &ExperimentConfig, entry: &CheckEntry) -> Result<Value> {
    let Some(Value::Object(mut obj)) = default_params(&entry.id) else {
        return Err(LabError::Config(format!("unknown check id `{}`", entry.id)));
    };
    let sim = [
        ("dt", cfg.sim.dt.map(Value::from)),
        ("t_max", cfg.sim.t_max.map(Value::from)),
        ("epsilon", cfg.sim.epsilon.map(Value::from)),
        ("n", cfg.sim.n.map(Value::from)),
    ];
    for (k, v) in sim {
        if let (Some(v), true) = (v, obj.contains_key(k)) {
            obj.insert(k.to_string(), v);
        }
    }
    if let Some(r) = &cfg.rebirth {
        let m = match (r, uses_partial_rebirth(&entry.id)) {
            (RebirthSpec::Full { mu }, false) => Some(mu),
            (RebirthSpec::Partial { nu, .. }, true) => Some(nu),
            _ => None,
        };
        if let (Some(m), true) = (m, obj.contains_key("measure")) {
            obj.insert("measure".into(), to_json(m));
        }
    }
    let overrides = to_json(&entry.params);
    if let Value::Object(o) = overrides {
        for (k, v) in o {
            obj.insert(k, v);
        }
    }
    if entry.promote {
        if !obj.contains_key("promote") {
            return Err(LabError::Config(format!("check `{}` has no band/trend verdict to promote", entry.id)));
        }
        obj.insert("promote".into(), Value::Bool(true));
    }
    let v = Value::Object(obj);
    validate_params(&entry.id, &v)?;
    Ok(v)
}

fn validate_thresholds(t: &Thresholds) -> Vec<String> {
    let v = to_json(t);
    let mut errs = Vec::new();
    if let Value::Object(o) = v {
        for (k, x) in o {
            if !x.as_f64().is_some_and(|f| f > 0.0 && f.is_finite()) {
                errs.push(format!("thresholds.{k} must be positive"));
            }
        }
    }
    if t.ks_level >= 1.0 {
        errs.push("thresholds.ks_level must be below 1".into());
    }
    errs
}

/// Parse and validate a config; every problem found is listed in the error.
pub fn parse_config(text: &str) -> Result<Plan> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Config(e.to_string().trim().to_string()))?;
    let mut errs = Vec::new();
    if config.schema_version != SCHEMA_VERSION {
        errs.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", config.schema_version));
    }
    if config.checks.is_empty() {
        errs.push("no checks requested".into());
    }
    if config.workers == Some(0) {
        errs.push("workers must be at least 1".into());
    }
    errs.extend(validate_thresholds(&config.thresholds));
    let mut checks = Vec::new();
    for entry in &config.checks {
        if !is_known_check(&entry.id) {
            errs.push(format!("unknown check id `{}`", entry.id));
            continue;
        }
        match resolve_params(&config, entry) {
            Ok(params) => checks.push(PlannedCheck { id: entry.id.clone(), seed: entry.seed, params }),
            Err(e) => errs.push(e.to_string()),
        }
    }
    let base = match config.process.build() {
        Ok(b) => Some(b),
        Err(e) => {
            errs.push(format!("process: {e}"));
            None
        }
    };
    if let Some(r) = &config.rebirth {
        if let Some(b) = &base {
            if let Err(e) = r.validate(b) {
                errs.push(format!("rebirth: {e}"));
            }
        }
    }
    if !errs.is_empty() {
        return Err(LabError::Config(errs.join("; ")));
    }
    // Hash of the canonical, fully resolved configuration.
    let canonical = serde_json::json!({
        "config": to_json(&config),
        "resolved": checks.iter().map(|c| serde_json::json!({"id": c.id, "seed": c.seed, "params": c.params})).collect::<Vec<_>>(),
    });
    let config_hash = hex::encode(Sha256::digest(canonical.to_string().as_bytes()));
    Ok(Plan { config, config_hash, checks, base: base.expect("validated") })
}

pub fn load_config(path: &Path) -> Result<Plan> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

/// Run one check with already-validated JSON parameters.
pub fn run_check(ctx: &Context, base: &Arc<BaseProcess>, id: &str, params: &Value) -> Result<CheckVerdict> {
    match id {
        KERNEL_GOLDEN_SUITE => kernel_golden_suite(ctx, &typed(id, params)?),
        KERNEL_POSITIVE_DEFINITE => kernel_positive_definite(ctx, &typed(id, params)?),
        SCALAR_IDENTITIES => scalar_identities(ctx, &typed(id, params)?),
        EQ_2_2_NORMALIZATION => check_normalizations(ctx, base, NormalizationKind::Base, &typed(id, params)?),
        EQ_INT3_NORMALIZATION => check_normalizations(ctx, base, NormalizationKind::Rebirth, &typed(id, params)?),
        EQ_6AZ_PARTIAL_NORMALIZATION => check_normalizations(ctx, base, NormalizationKind::Partial, &typed(id, params)?),
        DECOMPOSITION_EXACTNESS => decomposition_exactness(ctx, base, &typed(id, params)?),
        EISENBAUM_ISOMORPHISM => check_eisenbaum(ctx, base, &typed(id, params)?),
        CONDITIONAL_INDEPENDENCE => check_conditional_independence(ctx, base, &typed(id, params)?),
        COMBINED_IDENTITY => check_combined_identity(ctx, base, &typed(id, params)?),
        THM36_UNIFORM_MODULUS => thm36_uniform_modulus(ctx, &typed(id, params)?),
        THM31_LOCAL_MODULUS => thm31_local_modulus(ctx, &typed(id, params)?),
        THM41_LOCALTIME_MODULUS => localtime_modulus(ctx, base, &typed(id, params)?),
        _ => Err(LabError::Config(format!("unknown check id `{id}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub workers: usize,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub verdicts: Vec<CheckVerdict>,
    /// Wall-clock seconds per check, parallel to `verdicts`.
    pub runtimes_s: Vec<f64>,
    /// Files written, relative to the output directory.
    pub artifacts: Vec<String>,
    /// True when every non-informational check passed.
    pub passed: bool,
}

impl RunManifest {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn hard_pass(v: &CheckVerdict) -> bool {
    match v.status {
        Status::Pass | Status::Informational => true,
        Status::Fail | Status::Infeasible | Status::Error => false,
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| v.to_string())
}

fn tests_csv(v: &CheckVerdict) -> String {
    let mut s = String::from("role,name,kind,statistic,threshold,estimate,target,se,z_score,p_value,pass\n");
    for (role, list) in [("test", &v.tests), ("negative_control", &v.negative_controls)] {
        for t in list.iter() {
            let kind = serde_json::to_value(t.test_kind).ok().and_then(|k| k.as_str().map(String::from)).unwrap_or_default();
            s += &format!(
                "{role},{},{kind},{},{},{},{},{},{},{},{}\n",
                csv_field(&t.name),
                t.statistic,
                t.threshold,
                opt(t.estimate),
                opt(t.target),
                opt(t.se),
                opt(t.z_score),
                opt(t.p_value),
                t.pass
            );
        }
    }
    s
}

fn modulus_csv(reports: &[ModulusReport]) -> String {
    let mut s = String::from("report,mode,k,h,median,q25,q75,n,band_lo,band_hi\n");
    for r in reports {
        let mode = if r.mode == ModulusMode::Local { "local" } else { "uniform" };
        for p in &r.per_scale {
            s += &format!(
                "{},{mode},{},{},{},{},{},{},{},{}\n",
                csv_field(&r.name),
                p.k,
                p.h,
                p.median,
                p.q25,
                p.q75,
                p.n,
                r.band[0],
                r.band[1]
            );
        }
    }
    s
}

fn plot_descriptor(csv_name: &str, reports: &[ModulusReport]) -> Value {
    serde_json::json!({
        "data": csv_name,
        "x": "k",
        "y": "median",
        "band": ["q25", "q75"],
        "group_by": "report",
        "reference_lines": reports.iter().map(|r| serde_json::json!({"report": r.name, "band": r.band})).collect::<Vec<_>>(),
        "title": "median normalized modulus ratio by scale",
    })
}

/// Worker count: environment override, then config, then all cores.
pub fn resolve_workers(config: Option<usize>) -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .or(config)
        .unwrap_or_else(verify::default_workers)
}

/// Execute a validated plan, writing artifacts under `out_dir`.
pub fn execute(plan: &Plan, out_dir: &Path) -> Result<RunManifest> {
    let cfg = &plan.config;
    std::fs::create_dir_all(out_dir)?;
    let workers = resolve_workers(cfg.workers);
    let started_at = now();
    let mut verdicts = Vec::new();
    let mut runtimes = Vec::new();
    let mut artifacts = Vec::new();
    for (i, check) in plan.checks.iter().enumerate() {
        let ctx = Context {
            master_seed: check.seed.unwrap_or(cfg.master_seed),
            workers,
            thresholds: cfg.thresholds.clone(),
        };
        let t0 = Instant::now();
        let verdict = run_check(&ctx, &plan.base, &check.id, &check.params)
            .unwrap_or_else(|e| CheckVerdict::error(&check.id, check.params.clone(), ctx.check_seed(&check.id), &e));
        runtimes.push(t0.elapsed().as_secs_f64());
        let stem = format!("{i:02}_{}", check.id);
        if cfg.format.json() {
            let name = format!("{stem}.json");
            let body = serde_json::to_vec_pretty(&verdict).map_err(|e| LabError::Format(e.to_string()))?;
            write_atomic(&out_dir.join(&name), &body)?;
            artifacts.push(name);
        }
        if cfg.format.csv() {
            let name = format!("{stem}_tests.csv");
            write_atomic(&out_dir.join(&name), tests_csv(&verdict).as_bytes())?;
            artifacts.push(name);
            if !verdict.modulus.is_empty() {
                let name = format!("{stem}_modulus.csv");
                write_atomic(&out_dir.join(&name), modulus_csv(&verdict.modulus).as_bytes())?;
                let plot = format!("{stem}_modulus.plot.json");
                let body = serde_json::to_vec_pretty(&plot_descriptor(&name, &verdict.modulus)).expect("json");
                write_atomic(&out_dir.join(&plot), &body)?;
                artifacts.push(name);
                artifacts.push(plot);
            }
        }
        verdicts.push(verdict);
    }
    let passed = verdicts.iter().all(hard_pass);
    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        config_hash: plan.config_hash.clone(),
        tool_version: TOOL_VERSION.to_string(),
        master_seed: cfg.master_seed,
        workers,
        started_at,
        finished_at: now(),
        verdicts,
        runtimes_s: runtimes,
        artifacts,
        passed,
    };
    let body = serde_json::to_vec_pretty(&manifest).map_err(|e| LabError::Format(e.to_string()))?;
    write_atomic(&out_dir.join("manifest.json"), &body)?;
    Ok(manifest)
}

/// Load, validate and execute a config file. Relative output directories
/// resolve against the config file's directory.
pub fn run(config_path: &Path) -> Result<RunManifest> {
    let plan = load_config(config_path)?;
    let out = if plan.config.output_dir.is_absolute() {
        plan.config.output_dir.clone()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(&plan.config.output_dir)
    };
    execute(&plan, &out)
}

pub fn list_checks() -> Vec<(&'static str, &'static str)> {
    CHECKS.to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DumpKernel {
    /// u^β(x − y)
    UBeta,
    /// v^β(x, y), killed at 0
    VBeta,
    /// 𝔲⁰(x, y)
    FrakU0,
    /// σ_β²(x − y)
    Sigma2Beta,
    /// σ_0²(x − y)
    Sigma2Zero,
    /// φ(x − y)
    Phi,
    /// small-distance asymptotic of σ_0²(x − y)
    Sigma2Asymptotic,
    /// base p-potential density u^p(x, y)
    Potential,
    /// rebirthed kernel w^p(x, y)
    WP,
    /// f(x)
    F,
    /// u^p(x, x) − f(x)
    FMargin,
    /// diffusion scale function s(x)
    Scale,
}

impl std::str::FromStr for DumpKernel {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| LabError::Config(format!("unknown kernel `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpRequest {
    pub kernel: DumpKernel,
    /// Rate for the Lévy kernels; the base β when `None`.
    pub beta: Option<f64>,
    pub p: f64,
    /// Second argument of two-point kernels.
    pub y: f64,
    pub grid: Vec<f64>,
    /// Rebirth measure for w^p, f and the margin.
    pub measure: Measure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpSummary {
    pub rows: usize,
    pub failures: usize,
    /// max |K(x,y) − K(y,x)| over successful rows, for two-point kernels.
    pub max_asymmetry: Option<f64>,
}

/// Grid lo, lo + step, …, hi (inclusive up to rounding).
pub fn step_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(LabError::Config("grid needs finite bounds and a positive step".into()));
    }
    if hi < lo {
        return Ok(Vec::new());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..n).map(|i| lo + i as f64 * step).collect())
}

/// Evaluate a kernel on a grid and write `x,y,value,transposed,status` rows.
/// Failed rows carry NaN and the error in `status`.
pub fn kernel_dump(base: &Arc<BaseProcess>, req: &DumpRequest, out: &Path) -> Result<DumpSummary> {
    let beta = req.beta.unwrap_or(base.beta);
    let levy = base.levy().cloned();
    let need_levy = || levy.clone().ok_or_else(|| LabError::Unsupported("kernel is defined for Levy cases only".into()));
    let rk = match req.kernel {
        DumpKernel::WP | DumpKernel::F | DumpKernel::FMargin => Some(RebirthKernel::new(base.clone(), req.measure.clone(), req.p)?),
        _ => None,
    };
    let eval = |x: f64, y: f64| -> Result<f64> {
        match req.kernel {
            DumpKernel::UBeta => need_levy()?.u_beta(beta, x - y),
            DumpKernel::VBeta => need_levy()?.v_beta(beta, x, y),
            DumpKernel::FrakU0 => need_levy()?.frak_u0(x, y),
            DumpKernel::Sigma2Beta => need_levy()?.sigma2(beta, x - y),
            DumpKernel::Sigma2Zero => need_levy()?.sigma2(0.0, x - y),
            DumpKernel::Phi => need_levy()?.phi0(x - y),
            DumpKernel::Sigma2Asymptotic => need_levy()?.sigma2_asymptotic(x - y),
            DumpKernel::Potential => base.potential(req.p, x, y),
            DumpKernel::WP => rk.as_ref().expect("built").w_p(x, y),
            DumpKernel::F => rk.as_ref().expect("built").f(x),
            DumpKernel::FMargin => Ok(base.potential(req.p, x, x)? - rk.as_ref().expect("built").f(x)?),
            DumpKernel::Scale => match base.diffusion() {
                Some(d) => d.scale().s(x),
                None => Err(LabError::Unsupported("scale function is defined for diffusion cases only".into())),
            },
        }
    };
    let two_point = matches!(req.kernel, DumpKernel::VBeta | DumpKernel::FrakU0 | DumpKernel::Potential | DumpKernel::WP);
    let mut s = String::from("x,y,value,transposed,status\n");
    let (mut failures, mut asym) = (0, None::<f64>);
    for &x in &req.grid {
        let (value, status) = match eval(x, req.y) {
            Ok(v) => (v, "ok".to_string()),
            Err(e) => {
                failures += 1;
                (f64::NAN, e.to_string())
            }
        };
        let mut transposed = String::new();
        if two_point && status == "ok" {
            if let Ok(t) = eval(req.y, x) {
                transposed = t.to_string();
                asym = Some(asym.unwrap_or(0.0).max((value - t).abs()));
            }
        }
        s += &format!("{x},{},{value},{transposed},{}\n", req.y, csv_field(&status));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(out, s.as_bytes())?;
    Ok(DumpSummary { rows: req.grid.len(), failures, max_asymmetry: asym })
}

/// Re-run the estimator and the decomposition check on a stored bundle.
/// `overrides` are [`ReplayParams`] keys.
pub fn replay(
    bundle_path: &Path,
    check: &str,
    process: &ProcessConfig,
    overrides: &toml::Table,
    thresholds: &Thresholds,
) -> Result<(CheckVerdict, LocalTimeEstimate)> {
    if check != DECOMPOSITION_EXACTNESS {
        return Err(LabError::Unsupported(format!(
            "replay supports `{DECOMPOSITION_EXACTNESS}` only (got `{check}`)"
        )));
    }
    let bundle = PathBundle::read(bundle_path)?;
    let base = process.build()?;
    if spec_hash_of(&base) != bundle.spec_hash {
        return Err(LabError::Config("bundle was simulated from a different process spec".into()));
    }
    let mut obj = match to_json(&ReplayParams::default()) {
        Value::Object(o) => o,
        _ => unreachable!(),
    };
    if let Value::Object(o) = to_json(overrides) {
        obj.extend(o);
    }
    let params: ReplayParams = typed(check, &Value::Object(obj))?;
    let ctx = Context { master_seed: bundle.seed, workers: 1, thresholds: thresholds.clone() };
    replay_decomposition(&ctx, &base, &bundle, &params)
}

/// Local-time estimate as CSV rows `level,final_value,per_cycle...`.
pub fn estimate_csv(est: &LocalTimeEstimate) -> String {
    let n_cycles = est.cycle_totals.len();
    let mut s = String::from("level,final_value");
    for c in 0..n_cycles {
        s += &format!(",cycle_{c}");
    }
    s.push('\n');
    for (i, y) in est.y_grid.iter().enumerate() {
        s += &format!("{y},{}", est.final_values[i]);
        for c in &est.cycle_totals {
            s += &format!(",{}", c[i]);
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
master_seed = 7
[[checks]]
id = "kernel_golden_suite"
"#;

    #[test]
    fn minimal_config_parses() {
        let plan = parse_config(MINIMAL).unwrap();
        assert_eq!(plan.checks.len(), 1);
        assert_eq!(plan.base.case, CaseId::Case1);
    }

    #[test]
    fn unknown_id_and_key_are_named() {
        let text = format!("{MINIMAL}\n[[checks]]\nid = \"no_such_check\"\n[[checks]]\nid = \"scalar_identities\"\nparams = {{ bogus_key = 1 }}\n");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("no_such_check"), "{err}");
        assert!(err.contains("bogus_key"), "{err}");
    }

    #[test]
    fn sim_block_reaches_matching_params() {
        let text = "schema_version = 1\nmaster_seed = 1\n[sim]\ndt = 0.002\nn = 50\n[[checks]]\nid = \"eq_2_2_normalization\"\n";
        let plan = parse_config(text).unwrap();
        assert_eq!(plan.checks[0].params["dt"], 0.002);
        assert_eq!(plan.checks[0].params["n"], 50);
    }

    #[test]
    fn promote_requires_band_check() {
        let text = "schema_version = 1\nmaster_seed = 1\n[[checks]]\nid = \"kernel_golden_suite\"\npromote = true\n";
        assert!(parse_config(text).is_err());
    }

    #[test]
    fn step_grid_counts() {
        assert_eq!(step_grid(-3.0, 3.0, 0.01).unwrap().len(), 601);
        assert!(step_grid(1.0, 0.0, 0.1).unwrap().is_empty());
    }
}
