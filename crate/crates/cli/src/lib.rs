//! Batch driver behind the `qatlab` binary: parses a run config, dispatches
//! training, sweeps and diagnostics, and writes the output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use qatlab::config::RunConfig;
use qatlab::diagnostics::{run_harness, verify_all, CriterionResult, HarnessOutput, SuiteReport};
use qatlab::metrics::{write_atomic, write_json, write_metrics_csv, RunSummary};
use qatlab::trainer::{run_sweep, Start, SweepRecord, SweepTask};
use qatlab::{Error, Result};

/// Output directory override when `--out` is not given.
pub const OUT_ENV: &str = "QATLAB_OUT";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    Train,
    Diagnose(String),
    Sweep,
    VerifyAll,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: Command,
    pub config_path: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed_override: Option<u64>,
    pub jobs: usize,
}

/// What a command produced; `hard_failures == 0` means exit code 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub hard_failures: usize,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.hard_failures > 0)
    }
}

pub fn parse_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
        cfg.validate()?;
    }
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    config: &'a RunConfig,
    config_toml: String,
    seed: u64,
    wall_time_secs: f64,
    #[serde(flatten)]
    run: Option<RunSummary>,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct SweepSummary<'a> {
    config: &'a RunConfig,
    config_toml: String,
    seed: u64,
    wall_time_secs: f64,
    cells: &'a [SweepRecord],
    failed_cells: usize,
}

pub fn run(manifest: &RunManifest) -> Result<Outcome> {
    fs::create_dir_all(&manifest.output_dir)?;
    match &manifest.command {
        Command::Train => train(manifest),
        Command::Sweep => sweep(manifest),
        Command::Diagnose(name) => diagnose(manifest, name),
        Command::VerifyAll => verify(manifest),
    }
}

fn config_of(manifest: &RunManifest) -> Result<RunConfig> {
    let path = manifest.config_path.as_deref().ok_or_else(|| Error::Config("this command needs --config".into()))?;
    parse_config(path, manifest.seed_override)
}

fn train(manifest: &RunManifest) -> Result<Outcome> {
    let cfg = config_of(manifest)?;
    let exp = cfg.build()?;
    let started = Instant::now();
    let result = qatlab::trainer::run(
        exp.algorithm,
        &exp.objective,
        Start::weights(exp.w0.clone()),
        &exp.quantizer,
        &exp.train,
        &mut |_| {},
    )
    .and_then(|out| {
        let loss = out.final_loss(&exp.objective, &exp.quantizer)?;
        Ok((out, loss))
    });
    let wall_time_secs = started.elapsed().as_secs_f64();
    let metrics = manifest.output_dir.join("metrics.csv");
    let summary_path = manifest.output_dir.join("summary.json");
    let (run, error) = match &result {
        Ok((out, loss)) => {
            write_metrics_csv(&metrics, &out.trace)?;
            (Some(RunSummary::new(&out.trace, *loss)), None)
        }
        Err(e) => {
            log::error!("training failed: {e}");
            (None, Some(e.to_string()))
        }
    };
    let summary =
        TrainSummary { config: &cfg, config_toml: cfg.to_toml_string()?, seed: cfg.seed, wall_time_secs, run, error };
    write_json(&summary_path, &summary)?;
    let mut files = vec![summary_path];
    if result.is_ok() {
        files.insert(0, metrics);
    }
    Ok(Outcome { hard_failures: usize::from(result.is_err()), files })
}

fn sweep(manifest: &RunManifest) -> Result<Outcome> {
    let cfg = config_of(manifest)?;
    let grid = cfg.sweep.clone().ok_or_else(|| Error::Config("sweep needs a [sweep] section".into()))?;
    let exp = cfg.build()?;
    let task = SweepTask {
        objective: &exp.objective,
        w0: &exp.w0,
        spec: exp.spec,
        scale: exp.scale,
        algorithm: exp.algorithm,
    };
    let started = Instant::now();
    let cells = run_sweep(&task, &exp.train, &grid, manifest.jobs)?;
    let failed_cells = cells.iter().filter(|c| c.error.is_some()).count();
    let mut csv = String::from("group_size,interval,jac_mode,seed,final_loss,error\n");
    for c in &cells {
        let mode = serde_json::to_value(c.jac_mode)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.group_size,
            c.interval,
            mode.as_str().unwrap_or_default(),
            c.seed,
            c.final_loss.map(|l| format!("{l:e}")).unwrap_or_default(),
            c.error.as_deref().unwrap_or_default().replace(',', ";")
        ));
    }
    let table = manifest.output_dir.join("sweep.csv");
    write_atomic(&table, csv.as_bytes())?;
    let summary_path = manifest.output_dir.join("summary.json");
    let summary = SweepSummary {
        config: &cfg,
        config_toml: cfg.to_toml_string()?,
        seed: cfg.seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
        cells: &cells,
        failed_cells,
    };
    write_json(&summary_path, &summary)?;
    Ok(Outcome { hard_failures: failed_cells, files: vec![table, summary_path] })
}

fn write_harness(dir: &Path, out: &HarnessOutput) -> Result<Vec<PathBuf>> {
    let csv = dir.join(format!("{}.csv", out.name));
    write_atomic(&csv, out.table.to_csv().as_bytes())?;
    let json = dir.join(format!("{}.json", out.name));
    write_json(&json, out)?;
    Ok(vec![csv, json])
}

fn diagnose(manifest: &RunManifest, name: &str) -> Result<Outcome> {
    let out = run_harness(name, manifest.seed_override.unwrap_or(0))?;
    for c in &out.checks {
        log::info!("{}: {} ({} {})", c.name, if c.passed { "pass" } else { "FAIL" }, c.measured, c.detail);
    }
    let files = write_harness(&manifest.output_dir, &out)?;
    Ok(Outcome { hard_failures: usize::from(!out.passed), files })
}

/// One line per criterion, as printed by `verify-all`.
pub fn criterion_line(r: &CriterionResult) -> String {
    let status = if r.passed { "PASS" } else { "FAIL" };
    match (&r.output, &r.error) {
        (Some(out), _) => {
            let failing: Vec<&str> = out.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            let note = if !r.within_budget {
                format!(" over budget {:.0}s", r.budget_secs)
            } else if failing.is_empty() {
                String::new()
            } else {
                format!(" failing: {}", failing.join(", "))
            };
            format!("{status} {} {} ({:.1}s){note}", r.id, out.name, out.elapsed_secs)
        }
        (None, Some(e)) => format!("{status} {} error: {e}", r.id),
        (None, None) => format!("{status} {}", r.id),
    }
}

fn verify(manifest: &RunManifest) -> Result<Outcome> {
    let seed = manifest.seed_override.unwrap_or(0);
    let report: SuiteReport = verify_all(seed, &mut |r| println!("{}", criterion_line(r)));
    let mut files = Vec::new();
    for r in report.criteria.iter().chain(&report.extras) {
        if let Some(out) = &r.output {
            files.extend(write_harness(&manifest.output_dir, out)?);
        }
    }
    let path = manifest.output_dir.join("report.json");
    write_json(&path, &report)?;
    files.push(path);
    println!(
        "{} {}/{} criteria passed in {:.1}s",
        if report.passed { "PASS" } else { "FAIL" },
        report.criteria.iter().filter(|c| c.passed).count(),
        report.criteria.len(),
        report.elapsed_secs
    );
    Ok(Outcome { hard_failures: report.hard_failures(), files })
}
