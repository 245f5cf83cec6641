use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[sweep]
l_grid = [4, 8]
h_grid = [2, 4]
seeds = 3
probes = 4
l_ref = 16

[verify]
instances = 200
train_steps = 5
"#;

fn mfa(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfa"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out-dir")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn verify_bounds_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["verify-bounds"], SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&read(dir.path(), "bounds_report.json")).unwrap();
    assert!(rep["checks"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    let manifest: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["subcommand"], "verify-bounds");
}

#[test]
fn grad_check_on_defaults_meets_the_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["grad-check"], "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value = serde_json::from_str(&read(dir.path(), "grad_check.json")).unwrap();
    assert!(rep["max_rel_err"].as_f64().unwrap() <= 1e-6);
    assert_eq!(rep["cases"].as_array().unwrap().len(), 20);
}

#[test]
fn failed_invariants_exit_nonzero_and_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["grad-check"], "[grad_check]\ntolerance = 1e-15\n");
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("first failing invariant: grad_check[global_quadratic seed 0]"), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["grad-check"], "[optimizer]\nbeta1 = 0.99\nbeta2 = 0.9\n");
    assert_eq!(out.status.code(), Some(2));
    let out = mfa(dir.path(), &["grad-check"], "[model]\nwidth = 3\n");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_has_one_row_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["sweep"], SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read(dir.path(), "errors.csv").lines().count(), 1 + 2 * 2 * 3);
    let summary = read(dir.path(), "summary.csv");
    assert!(summary.starts_with("L,H,tau,mean_eps2,stderr\n"));
    assert_eq!(summary.lines().count(), 1 + 2 * 2 * 4);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(mfa(a.path(), &["sweep", "--threads", "1", "--seed", "9"], SMALL).status.success());
    assert!(mfa(b.path(), &["sweep", "--threads", "3", "--seed", "9"], SMALL).status.success());
    for name in ["errors.csv", "summary.csv", "param_div.csv", "rates.json", "manifest.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(a.path(), "manifest.json")).unwrap();
    assert_eq!(manifest["master_seed"], 9);
}

#[test]
fn report_rebuilds_the_summaries_from_the_error_table() {
    let dir = tempfile::tempdir().unwrap();
    assert!(mfa(dir.path(), &["sweep"], SMALL).status.success());
    let before = ["summary.csv", "rates.json", "param_div.csv"].map(|n| read(dir.path(), n));
    for n in ["summary.csv", "rates.json", "param_div.csv"] {
        std::fs::remove_file(dir.path().join("out").join(n)).unwrap();
    }
    let out = mfa(dir.path(), &["report"], SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(before, ["summary.csv", "rates.json", "param_div.csv"].map(|n| read(dir.path(), n)));
}

#[test]
fn param_div_starts_at_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = mfa(dir.path(), &["param-div"], SMALL);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "param_div.csv");
    assert!(csv.lines().skip(1).filter(|l| l.split(',').nth(2) == Some("0")).all(|l| l.split(',').nth(3) == Some("0")));
}
