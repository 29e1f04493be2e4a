use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rebirth-lab"))
        .args(args)
        .current_dir(cwd)
        .env("REBIRTH_LAB_WORKERS", "2")
        .output()
        .expect("binary runs")
}

#[test]
fn list_checks_names_every_id() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["list-checks"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.contains("eq_int3_normalization") && text.contains("thm31_local_modulus"));
}

#[test]
fn run_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = "schema_version = 1\nmaster_seed = 3\nformat = \"both\"\n[[checks]]\nid = \"kernel_golden_suite\"\n";
    std::fs::write(dir.path().join("good.toml"), good).unwrap();
    let out = bin(&["run", "good.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("results/manifest.json").exists());
    assert!(dir.path().join("results/00_kernel_golden_suite_tests.csv").exists());

    std::fs::write(dir.path().join("bad.toml"), good.replace("kernel_golden_suite", "not_a_check")).unwrap();
    let out = bin(&["run", "bad.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_check"));

    // A deliberately unreachable tolerance makes a hard check fail.
    let failing = format!("{good}[thresholds]\nkernel_rel_tol = 1e-300\n");
    std::fs::write(dir.path().join("fail.toml"), failing).unwrap();
    let out = bin(&["run", "fail.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dump_kernel_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["dump-kernel", "--kernel", "u_beta", "--lo", "-3", "--hi", "3", "--step", "0.01", "-o", "u.csv"], dir.path());
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("u.csv")).unwrap();
    assert_eq!(text.lines().count(), 602);

    let out = bin(&["dump-kernel", "--kernel", "w_p", "--atom", "1", "--y", "1", "-o", "w.csv"], dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("max |K(x,y) - K(y,x)|"));

    let out = bin(&["dump-kernel", "--kernel", "phi", "--grid", "", "-o", "e.csv"], dir.path());
    assert!(out.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("e.csv")).unwrap().lines().count(), 1);
}

#[test]
fn simulate_then_replay() {
    let dir = tempfile::tempdir().unwrap();
    assert!(bin(&["simulate", "--seed", "5", "-o", "b.bin"], dir.path()).status.success());
    let out = bin(&["replay", "b.bin", "-o", "v.json", "--estimate-csv", "l.csv"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let again = bin(&["replay", "b.bin", "-o", "v2.json", "--estimate-csv", "l2.csv"], dir.path());
    assert!(again.status.success());
    assert_eq!(std::fs::read(dir.path().join("l.csv")).unwrap(), std::fs::read(dir.path().join("l2.csv")).unwrap());

    let mut bytes = std::fs::read(dir.path().join("b.bin")).unwrap();
    bytes[60] ^= 1;
    std::fs::write(dir.path().join("b.bin"), bytes).unwrap();
    let out = bin(&["replay", "b.bin"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}
