use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rebirth_lab::harness::{self, DumpKernel, DumpRequest, ProcessConfig};
use rebirth_lab::levy_kernels::LevyExponentSpec;
use rebirth_lab::measure::Measure;
use rebirth_lab::path_engine::{SimConfig, Simulator};
use rebirth_lab::rebirth_kernels::RebirthSpec;
use rebirth_lab::process::CaseId;
use rebirth_lab::verify::{Status, Thresholds};
use rebirth_lab::LabError;

/// Kernels, simulation and verification for rebirthed Markov processes.
#[derive(Parser)]
#[command(name = "rebirth-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks listed in a TOML config and write a manifest.
    Run {
        config: PathBuf,
        /// Worker threads (overrides the config).
        #[arg(long, env = "REBIRTH_LAB_WORKERS")]
        workers: Option<usize>,
    },
    /// Evaluate a kernel on a grid and write CSV.
    DumpKernel {
        /// u_beta, v_beta, frak_u0, sigma2_beta, sigma2_zero, phi, sigma2_asymptotic,
        /// potential, w_p, f, f_margin or scale.
        #[arg(long)]
        kernel: DumpKernel,
        #[command(flatten)]
        process: ProcessArgs,
        /// Rate for the Levy kernels (defaults to the process beta).
        #[arg(long)]
        rate: Option<f64>,
        /// Discount rate p for potential, w_p, f and f_margin.
        #[arg(long, default_value_t = 1.0)]
        p: f64,
        /// Second argument of two-point kernels.
        #[arg(long, default_value_t = 0.0)]
        y: f64,
        /// Explicit comma-separated grid; an empty string gives a header-only file.
        #[arg(long, conflicts_with_all = ["lo", "hi", "step"])]
        grid: Option<String>,
        #[arg(long, default_value_t = -3.0, allow_negative_numbers = true)]
        lo: f64,
        #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
        hi: f64,
        #[arg(long, default_value_t = 0.01)]
        step: f64,
        /// Rebirth atom `x:weight` (repeatable); defaults to a unit atom at 0.
        #[arg(long = "atom", allow_negative_numbers = true)]
        atoms: Vec<String>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Re-run the estimator and a check on a stored path bundle.
    Replay {
        bundle: PathBuf,
        #[arg(long, default_value = "decomposition_exactness")]
        check: String,
        #[command(flatten)]
        process: ProcessArgs,
        /// Occupation bandwidth.
        #[arg(long)]
        epsilon: Option<f64>,
        /// occupation, bridge or auto.
        #[arg(long)]
        estimator: Option<String>,
        /// Verdict JSON output (stdout when omitted).
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Local-time CSV output.
        #[arg(long)]
        estimate_csv: Option<PathBuf>,
    },
    /// Print every check id with a description.
    ListChecks,
    /// Simulate one fully rebirthed path and store it as a bundle for replay.
    Simulate {
        #[command(flatten)]
        process: ProcessArgs,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        start: f64,
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        #[arg(long, default_value_t = 5.0)]
        t_max: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Rebirth atom `x:weight` (repeatable); defaults to a unit atom at 0.
        #[arg(long = "atom", allow_negative_numbers = true)]
        atoms: Vec<String>,
        #[arg(long, short)]
        output: PathBuf,
        /// Also write the path as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ProcessArgs {
    /// Base case 1-6.
    #[arg(long, default_value_t = 1)]
    case: u8,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Stable index of psi(l) = scale |l|^alpha.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.5)]
    scale: f64,
    /// TOML file with a [process] table (overrides the flags above).
    #[arg(long)]
    process_config: Option<PathBuf>,
}

impl ProcessArgs {
    fn config(&self) -> Result<ProcessConfig, LabError> {
        if let Some(path) = &self.process_config {
            #[derive(serde::Deserialize)]
            struct Wrapper {
                process: ProcessConfig,
            }
            let text = std::fs::read_to_string(path)?;
            let w: Wrapper = toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?;
            return Ok(w.process);
        }
        let case = CaseId::try_from(self.case).map_err(LabError::Config)?;
        let levy = case.is_levy().then(|| LevyExponentSpec::stable(self.alpha, self.scale)).transpose()?;
        Ok(ProcessConfig { case, beta: self.beta, levy, diffusion: None })
    }
}

fn parse_atoms(atoms: &[String]) -> Result<Measure, LabError> {
    if atoms.is_empty() {
        return Ok(Measure::dirac(0.0));
    }
    let parsed: Option<Vec<(f64, f64)>> = atoms
        .iter()
        .map(|a| {
            let (x, w) = a.split_once(':').unwrap_or((a, "1"));
            Some((x.trim().parse().ok()?, w.trim().parse().ok()?))
        })
        .collect();
    parsed.map(Measure::from_atoms).ok_or_else(|| LabError::Config("atoms must look like x:weight".into()))
}

fn parse_grid(s: &str) -> Result<Vec<f64>, LabError> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| LabError::Config(format!("bad grid value `{t}`"))))
        .collect()
}

fn run(cli: Cli) -> Result<u8, LabError> {
    match cli.command {
        Command::Run { config, workers } => {
            if let Some(w) = workers {
                std::env::set_var(harness::WORKERS_ENV, w.to_string());
            }
            let m = harness::run(&config)?;
            for (v, secs) in m.verdicts.iter().zip(&m.runtimes_s) {
                let status = serde_json::to_value(v.status).ok().and_then(|s| s.as_str().map(String::from)).unwrap_or_default();
                println!("{:<32} {:<13} {:>8.1}s", v.check, status, secs);
                if v.status == Status::Error || v.status == Status::Infeasible {
                    for n in &v.notes {
                        println!("    {n}");
                    }
                }
            }
            println!("manifest config hash {}", m.config_hash);
            Ok(m.exit_code() as u8)
        }
        Command::DumpKernel { kernel, process, rate, p, y, grid, lo, hi, step, atoms, output } => {
            let base = process.config()?.build()?;
            let grid = match grid {
                Some(g) => parse_grid(&g)?,
                None => harness::step_grid(lo, hi, step)?,
            };
            let req = DumpRequest { kernel, beta: rate, p, y, grid, measure: parse_atoms(&atoms)? };
            let s = harness::kernel_dump(&base, &req, &output)?;
            println!("{} rows, {} failed", s.rows, s.failures);
            if let Some(a) = s.max_asymmetry {
                println!("max |K(x,y) - K(y,x)| = {a:.6e}");
            }
            Ok(if s.failures == 0 { 0 } else { 1 })
        }
        Command::Replay { bundle, check, process, epsilon, estimator, output, estimate_csv } => {
            let mut overrides = toml::Table::new();
            if let Some(e) = epsilon {
                overrides.insert("epsilon".into(), toml::Value::Float(e));
            }
            if let Some(e) = estimator {
                overrides.insert("estimator".into(), toml::Value::String(e));
            }
            let (v, est) = harness::replay(&bundle, &check, &process.config()?, &overrides, &Thresholds::default())?;
            let json = serde_json::to_string_pretty(&v).map_err(|e| LabError::Format(e.to_string()))?;
            match output {
                Some(p) => harness::write_atomic(&p, json.as_bytes())?,
                None => println!("{json}"),
            }
            if let Some(p) = estimate_csv {
                harness::write_atomic(&p, harness::estimate_csv(&est).as_bytes())?;
            }
            Ok(if v.pass { 0 } else { 1 })
        }
        Command::Simulate { process, start, dt, t_max, epsilon, seed, atoms, output, csv } => {
            let base = process.config()?.build()?;
            let sim = Simulator::new(base, SimConfig::new(dt, t_max, epsilon, seed))?;
            let bundle = sim.simulate_rebirth(&RebirthSpec::full(parse_atoms(&atoms)?), start)?;
            harness::write_atomic(&output, &bundle.to_bytes())?;
            if let Some(p) = csv {
                bundle.write_csv(&p)?;
            }
            println!("{} cycles, end time {:.4}", bundle.cycles.len(), bundle.end_time());
            Ok(0)
        }
        Command::ListChecks => {
            for (id, what) in harness::list_checks() {
                println!("{id:<32} {what}");
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            // Check failures are reported through Ok(1); anything raised is a config or input error.
            ExitCode::from(2)
        }
    }
}
