use std::sync::Arc;

use rebirth_lab::harness::{self, DumpKernel, DumpRequest, ProcessConfig};
use rebirth_lab::levy_kernels::{LevyExponentSpec, LevyKernels};
use rebirth_lab::measure::Measure;
use rebirth_lab::path_engine::{
    estimate_local_time, LocalTimeMethod, LocalTimeRequest, Normalization, SimConfig, Simulator,
};
use rebirth_lab::process::{BaseProcess, CaseId, Family};
use rebirth_lab::rebirth_kernels::RebirthSpec;
use rebirth_lab::verify::{Status, Thresholds};
use rebirth_lab::LabError;

fn base() -> Arc<BaseProcess> {
    let k = Arc::new(LevyKernels::new(LevyExponentSpec::brownian()).unwrap());
    Arc::new(BaseProcess::new(CaseId::Case1, Family::Levy(k), 1.0).unwrap())
}

const MINIMAL: &str = "schema_version = 1\nmaster_seed = 11\noutput_dir = \"out\"\n[[checks]]\nid = \"kernel_golden_suite\"\n";

#[test]
fn minimal_run_passes_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, MINIMAL).unwrap();
    let t0 = std::time::Instant::now();
    let a = harness::run(&cfg).unwrap();
    assert!(t0.elapsed().as_secs_f64() < 60.0);
    assert_eq!(a.verdicts.len(), 1);
    assert_eq!(a.verdicts[0].status, Status::Pass);
    assert_eq!(a.exit_code(), 0);
    assert!(dir.path().join("out/manifest.json").exists());
    let b = harness::run(&cfg).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    let stats = |m: &harness::RunManifest| m.verdicts.iter().map(|v| v.statistics_json()).collect::<Vec<_>>();
    assert_eq!(stats(&a), stats(&b));
    let on_disk: harness::RunManifest =
        serde_json::from_slice(&std::fs::read(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(stats(&on_disk), stats(&b));
}

#[test]
fn unknown_check_is_named() {
    let text = MINIMAL.replace("kernel_golden_suite", "eq_99_missing");
    let err = harness::parse_config(&text).unwrap_err();
    assert!(matches!(&err, LabError::Config(m) if m.contains("eq_99_missing")), "{err}");
}

#[test]
fn unknown_top_level_key_is_named() {
    let text = format!("colour = 3\n{MINIMAL}");
    let err = harness::parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("colour"), "{err}");
}

#[test]
fn nonpositive_threshold_rejected() {
    let text = format!("{MINIMAL}[thresholds]\nz_max = -1.0\n");
    let err = harness::parse_config(&text).unwrap_err().to_string();
    assert!(err.contains("z_max"), "{err}");
}

#[test]
fn dump_brownian_u_beta() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("u.csv");
    let req = DumpRequest {
        kernel: DumpKernel::UBeta,
        beta: Some(1.0),
        p: 1.0,
        y: 0.0,
        grid: harness::step_grid(-3.0, 3.0, 0.01).unwrap(),
        measure: Measure::dirac(0.0),
    };
    let s = harness::kernel_dump(&base(), &req, &out).unwrap();
    assert_eq!((s.rows, s.failures), (601, 0));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 601);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let x: f64 = f[0].parse().unwrap();
        let v: f64 = f[2].parse().unwrap();
        let want = (-(2f64).sqrt() * x.abs()).exp() / 2f64.sqrt();
        assert!((v - want).abs() <= 1e-6 * want, "x={x}: {v} vs {want}");
    }
}

#[test]
fn dump_w_reports_asymmetry_and_empty_grid_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let req = DumpRequest {
        kernel: DumpKernel::WP,
        beta: None,
        p: 1.0,
        y: 1.0,
        grid: vec![-1.0, 0.0, 0.5, 2.0],
        measure: Measure::dirac(1.0),
    };
    let s = harness::kernel_dump(&base(), &req, &dir.path().join("w.csv")).unwrap();
    assert!(s.max_asymmetry.unwrap() > 0.0);
    let empty = dir.path().join("e.csv");
    let s = harness::kernel_dump(&base(), &DumpRequest { grid: vec![], ..req }, &empty).unwrap();
    assert_eq!(s.rows, 0);
    assert_eq!(std::fs::read_to_string(&empty).unwrap(), "x,y,value,transposed,status\n");
}

#[test]
fn dump_marks_failed_rows() {
    let dir = tempfile::tempdir().unwrap();
    // 𝔲⁰ is undefined at 0: that row fails, the others succeed.
    let req = DumpRequest {
        kernel: DumpKernel::FrakU0,
        beta: None,
        p: 1.0,
        y: 0.5,
        grid: vec![-1.0, 0.0, 1.0],
        measure: Measure::dirac(0.0),
    };
    let out = dir.path().join("f.csv");
    let s = harness::kernel_dump(&base(), &req, &out).unwrap();
    assert_eq!(s.failures, 1);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.lines().nth(2).unwrap().contains("NaN"));
}

fn stored_bundle(dir: &std::path::Path) -> std::path::PathBuf {
    let sim = Simulator::new(base(), SimConfig::new(1e-3, 4.0, 0.05, 99)).unwrap();
    let b = sim.simulate_rebirth(&RebirthSpec::full(Measure::dirac(0.0)), 0.0).unwrap();
    let path = dir.join("b.bin");
    b.write(&path).unwrap();
    path
}

#[test]
fn replay_reproduces_estimates_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = stored_bundle(dir.path());
    let grid = vec![-0.5, 0.0, 0.5];
    let mut ov = toml::Table::new();
    ov.insert("y_grid".into(), toml::Value::Array(grid.iter().map(|&g| toml::Value::Float(g)).collect()));
    let (v, est) = harness::replay(&path, "decomposition_exactness", &ProcessConfig::default(), &ov, &Thresholds::default()).unwrap();
    assert!(v.pass, "{:?}", v.tests);
    let bundle = rebirth_lab::path_engine::PathBundle::read(&path).unwrap();
    let req = LocalTimeRequest::new(grid, LocalTimeMethod::Occupation { epsilon: 0.05 });
    let direct = estimate_local_time(&base(), &bundle, req, Normalization::Full(CaseId::Case1)).unwrap();
    assert_eq!(est.fixed_final, direct.fixed_final);

    ov.insert("epsilon".into(), toml::Value::Float(0.1));
    let (v2, est2) = harness::replay(&path, "decomposition_exactness", &ProcessConfig::default(), &ov, &Thresholds::default()).unwrap();
    assert_ne!(est2.final_values, est.final_values);
    assert!(v2.tests[0].pass && v2.tests[0].statistic <= 1e-12);
}

#[test]
fn replay_rejects_corruption_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = stored_bundle(dir.path());
    let mut bytes = std::fs::read(&path).unwrap();
    let ok = bytes.clone();
    bytes[200] ^= 0xff;
    std::fs::write(&path, &bytes).unwrap();
    let t = toml::Table::new();
    let err = harness::replay(&path, "decomposition_exactness", &ProcessConfig::default(), &t, &Thresholds::default()).unwrap_err();
    assert!(matches!(err, LabError::Checksum(_)), "{err}");
    std::fs::write(&path, &ok[..ok.len() / 2]).unwrap();
    assert!(harness::replay(&path, "decomposition_exactness", &ProcessConfig::default(), &t, &Thresholds::default()).is_err());
    let mut v = ok.clone();
    v[4] = v[4].wrapping_add(1);
    std::fs::write(&path, &v).unwrap();
    let err = harness::replay(&path, "decomposition_exactness", &ProcessConfig::default(), &t, &Thresholds::default()).unwrap_err();
    assert!(matches!(&err, LabError::Format(m) if m.contains("version")), "{err}");
}
