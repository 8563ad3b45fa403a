use std::fs;
use std::path::Path;
use std::process::Command as Process;

use qatlab_cli::{run, Command, RunManifest};

const QUADRATIC: &str = r#"
seed = 3

[objective]
kind = "pl_quadratic"
dim = 8

[quant]
bits = { generic = 6 }
step = 0.05
scale = "fixed"
group_size = 4

[train]
steps = 100
stepsize = 0.2
refresh = { interval = 10 }
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn manifest(command: Command, config: Option<&Path>, out: &Path) -> RunManifest {
    RunManifest {
        command,
        config_path: config.map(Path::to_path_buf),
        output_dir: out.to_path_buf(),
        seed_override: None,
        jobs: 1,
    }
}

#[test]
fn train_writes_one_row_per_step_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let out = dir.path().join("out");
    let outcome = run(&manifest(Command::Train, Some(&cfg), &out)).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,loss,grad_norm,surrogate_grad_norm,mean_gain,min_gain,max_gain,frac_saturated,refresh_flag"
    );
    assert_eq!(lines.count(), 100);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
    assert!(summary["final_loss"].as_f64().unwrap().is_finite());
    assert!(summary["wall_time_secs"].as_f64().unwrap() >= 0.0);
    assert!(fs::read_dir(&out).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn summary_echo_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let first = dir.path().join("a");
    run(&manifest(Command::Train, Some(&cfg), &first)).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    let echo = dir.path().join("echo.toml");
    fs::write(&echo, summary["config_toml"].as_str().unwrap()).unwrap();
    let second = dir.path().join("b");
    run(&manifest(Command::Train, Some(&echo), &second)).unwrap();
    assert_eq!(fs::read(first.join("metrics.csv")).unwrap(), fs::read(second.join("metrics.csv")).unwrap());
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&manifest(Command::Train, Some(&cfg), &a)).unwrap();
    run(&RunManifest { seed_override: Some(9), ..manifest(Command::Train, Some(&cfg), &b) }).unwrap();
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(b.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 9);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn sweep_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let text =
        format!("{QUADRATIC}\n[sweep]\ngroup_sizes = [2, 4]\nintervals = [5, 10]\njac_modes = [\"ste\", \"probe\"]\n");
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    let outcome = run(&RunManifest { jobs: 2, ..manifest(Command::Sweep, Some(&cfg), &out) }).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(csv.lines().nth(1).unwrap().starts_with("2,5,ste,"));
}

#[test]
fn sweep_without_grid_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    assert!(run(&manifest(Command::Sweep, Some(&cfg), dir.path())).is_err());
}

#[test]
fn diagnose_writes_table_and_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = run(&manifest(Command::Diagnose("reduction".into()), None, dir.path())).unwrap();
    assert_eq!(outcome.exit_code(), 0);
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("reduction.json")).unwrap()).unwrap();
    assert_eq!(verdict["passed"], true);
    assert!(dir.path().join("reduction.csv").exists());
    assert!(run(&manifest(Command::Diagnose("no_such_harness".into()), None, dir.path())).is_err());
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), QUADRATIC);
    let bin = env!("CARGO_BIN_EXE_qatlab");
    let ok = Process::new(bin)
        .args(["train", "--config"])
        .arg(&good)
        .arg("--out")
        .arg(dir.path().join("ok"))
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));

    let diverging = QUADRATIC.replace("stepsize = 0.2", "stepsize = 50.0").replace("{ generic = 6 }", "\"identity\"");
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, diverging).unwrap();
    let failed = Process::new(bin)
        .args(["train", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("bad"))
        .output()
        .unwrap();
    assert_eq!(failed.status.code(), Some(1));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("bad/summary.json")).unwrap()).unwrap();
    assert!(summary["error"].as_str().unwrap().contains("diverg"));

    let broken = dir.path().join("broken.toml");
    fs::write(&broken, "[objective]\nkind = \"pl_quadratic\"\nbogus = 1\n").unwrap();
    let usage =
        Process::new(bin).args(["train", "--config"]).arg(&broken).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = Process::new(env!("CARGO_BIN_EXE_qatlab"))
        .args(["diagnose", "reduction"])
        .env("QATLAB_OUT", dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("reduction.json").exists());
}
