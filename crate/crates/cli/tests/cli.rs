use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hopscale"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = std::fs::read_to_string(config("ideal.toml")).unwrap();
    let p = dir.join("edited.toml");
    std::fs::write(&p, edit(text)).unwrap();
    p
}

#[test]
fn validate_on_ideal_gas_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["validate", "--config", config("ideal.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--budget-scale", "0.5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.toml", "manifest.json", "summary.json", "raw.json", "validate.csv", "k2.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
}

#[test]
fn s_outside_range_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t.replace("s = 0.25", "s = 0.7"));
    let o = run(&["scaling", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("s ∈ [0,1/2]"), "{}", stderr(&o));
    assert!(!dir.path().join("r").exists());
}

#[test]
fn unknown_key_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t.replace("z = 0.05", "z = 0.05\nactivity = 0.05"));
    let o = run(&["sample", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
}

#[test]
fn laht_violation_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t.replace("family = \"zero\"", "family = \"soft-disk\"\ntheta = 1.0\nr0 = 1.0").replace("z = 0.05", "z = 3.0"));
    let o = run(&["sample", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("LA-HT violated: lhs="), "{}", stderr(&o));
}

#[test]
fn missing_config_is_runtime_error() {
    let o = run(&["sample", "--config", "/nonexistent/config.toml", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_output_directory_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t.replace("output = \"runs/ideal\"\n", ""));
    let o = run(&["sample", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sample_writes_readable_binary_dump() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let o = run(&["sample", "--config", config("ideal.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--budget-scale", "0.05"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let set = hopscale_core::gibbs::read_samples(&out.join("samples.bin")).unwrap();
    assert_eq!(set.len(), 8 * 100);
    let counts = std::fs::read_to_string(out.join("counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 1 + set.len());
}

#[test]
fn dynamics_run_produces_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = run(&["dynamics", "--config", config("ideal.toml").to_str().unwrap(), "--out", out.to_str().unwrap(), "--budget-scale", "0.25", "--threads", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("stationarity.csv").exists());
    assert!(out.join("trajectory_007.csv").exists());
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn scaling_is_deterministic_and_report_rerenders_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("default.toml");
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for out in &outs {
        let o = run(&["scaling", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--budget-scale", "0.005"]);
        assert!(code(&o) <= 1, "{}", stderr(&o));
    }
    for f in ["norms.csv", "cross_check.csv", "factorization.csv", "box_comparison.csv"] {
        assert_eq!(std::fs::read(outs[0].join(f)).unwrap(), std::fs::read(outs[1].join(f)).unwrap(), "{f} differs");
    }
    let before = read_all(&outs[0]);
    for f in ["summary.json", "norms.csv", "manifest.json"] {
        std::fs::write(outs[0].join(f), b"stale").unwrap();
    }
    let o = run(&["report", "--out", outs[0].to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_all(&outs[0]), before);

    let other = dir.path().join("reseeded");
    run(&["scaling", "--config", cfg.to_str().unwrap(), "--out", other.to_str().unwrap(), "--budget-scale", "0.005", "--seed", "99"]);
    assert_ne!(std::fs::read(outs[0].join("norms.csv")).unwrap(), std::fs::read(other.join("norms.csv")).unwrap());
}

#[test]
fn report_without_raw_record_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}
