use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stagecache"))
}

fn write_config(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "run.toml",
        "frames = 2\nsteps = 6\ncache.n = 2\n",
    );
    let out_dir = dir.path().join("out");
    let out = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--set", "decode.slice=true", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["config"]["slice_decode"], true);
    assert_eq!(report["full_steps"], 3);
    for f in [
        "video.f32",
        "video.f32.hdr",
        "ledger.json",
        "ledger.csv",
        "report.json",
        "metrics.csv",
    ] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
}

#[test]
fn config_errors_exit_2() {
    let out = bin()
        .args(["run", "--set", "no.such.key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "--set", "height=60"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["sweep-n", "--n", "4,2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin()
        .args(["ablate", "--set", "cache.n=2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn budget_abort_exits_3() {
    let out = bin()
        .args([
            "run",
            "--set",
            "frames=2",
            "--set",
            "steps=4",
            "--set",
            "budget.fast=4096",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of fast-tier memory"));
}

#[test]
fn compare_prints_a_row() {
    let dir = tempfile::tempdir().unwrap();
    let base = write_config(dir.path(), "base.toml", "frames = 2\nsteps = 6\n");
    let var = write_config(
        dir.path(),
        "var.toml",
        "frames = 2\nsteps = 6\n[cache]\nn = 3\n",
    );
    let out = bin()
        .args(["compare", "--baseline"])
        .arg(&base)
        .arg("--variant")
        .arg(&var)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let row: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(row["mac_speed_up"].as_f64().unwrap() > 1.0);
    assert!(row["mean_psnr"].as_f64().unwrap() < 99.0);
}

#[test]
fn export_plots_writes_per_interval_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "export-plots",
            "--n",
            "1,2",
            "--set",
            "frames=2",
            "--set",
            "steps=4",
            "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("metrics_n2.csv")).unwrap();
    assert!(csv.starts_with("frame_index,psnr,ssim\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("metrics_n1.csv").exists());
    assert!(dir.path().join("sweep.csv").exists());
}
