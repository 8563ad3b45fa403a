//! Metric and report output. Every file is written to a sibling temporary
//! file and renamed into place, so readers never see a partial file.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::trainer::MetricsRecord;
use crate::Result;

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn metrics_csv(trace: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(MetricsRecord::CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, trace: &[MetricsRecord]) -> Result<()> {
    write_atomic(path, metrics_csv(trace).as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub refreshes: usize,
    pub mean_gain: f64,
    pub frac_saturated: f64,
}

impl RunSummary {
    pub fn new(trace: &[MetricsRecord], final_loss: f64) -> Self {
        let last = trace.last();
        RunSummary {
            steps: trace.len(),
            initial_loss: trace.first().map_or(final_loss, |r| r.loss),
            final_loss,
            refreshes: trace.iter().filter(|r| r.refresh_flag).count(),
            mean_gain: last.map_or(1.0, |r| r.mean_gain),
            frac_saturated: last.map_or(0.0, |r| r.frac_saturated),
        }
    }
}
