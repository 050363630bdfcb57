//! End-to-end checks of the binary: argument plumbing, config loading,
//! overrides, error reporting and sweep dispatch.

use std::path::Path;
use std::process::Command;

fn gridsync() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridsync"))
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn toy_mse_exact_row_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridsync()
        .args(["toy-mse", "--out"])
        .arg(dir.path())
        .args(["--set", "d=1", "--set", "l=2", "--set", "sigma2=1.0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&dir.path().join("results.csv"));
    assert!(csv.contains("0.125"), "csv: {csv}");
    assert!(dir.path().join("manifest.json").exists());
}

#[test]
fn generate_writes_instance_noiseless_matches_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridsync()
        .args(["generate", "--seed", "9", "--out"])
        .arg(dir.path())
        .args(["--set", "p=0.0", "--set", "extents=[8, 8]"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let inst = gridsync::experiment::load_instance(&dir.path().join("instance.json")).unwrap();
    assert_eq!(inst.edge_agreement_rate(), Some(1.0));
}

#[test]
fn invalid_parameter_is_a_named_cli_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridsync()
        .args(["generate", "--seed", "1", "--out"])
        .arg(dir.path())
        .args(["--set", "p=0.7"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("p must lie in [0, 1/2)"), "stderr: {stderr}");
}

#[test]
fn config_document_with_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(
        &config,
        r#"
kind = "toy-mse"
format = "jsonl"

[params]
d = 1
l = 2
sigma2 = 1.0

[sweep]
l = [2, 4, 8]
"#,
    )
    .unwrap();
    let out = gridsync()
        .arg("sweep")
        .args(["--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read(&dir.path().join("results.jsonl"));
    assert_eq!(rows.lines().count(), 3);
}

#[test]
fn kind_mismatch_between_config_and_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "kind = \"toy-mse\"\n[params]\nd = 1\nl = 2\nsigma2 = 1.0\n").unwrap();
    let out = gridsync()
        .arg("percolation")
        .args(["--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("toy-mse"), "stderr: {stderr}");
}
