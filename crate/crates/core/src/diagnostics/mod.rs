//! Numerical checks of the surrogate-Jacobian theory on small objectives.
//!
//! The sensitivity "oracle" is always the Monte-Carlo mean-field estimate
//! from [`Quantizer::mean_field_sensitivity_stats`], reported together with
//! its standard error. Group-level comparisons use the group mean of the
//! oracle because the learned gains are one scalar per group.

mod dominance;
mod probe_rate;
mod suite;
mod tracking;
mod windows;

use std::time::Instant;

use serde::Serialize;

use crate::jacobian::SurrogateJacobian;
use crate::quant::{McEstimate, Quantizer};
use crate::{norm, Error, Result};

pub use dominance::{dominance_harness, DominanceConfig, DominanceSeed};
pub use probe_rate::{probe_rate_harness, probe_rate_weights, ProbeRateConfig, ProbeRateResult};
pub use suite::{
    exhaustive_deviation, run_harness, verify_all, Criterion, CriterionResult, SuiteReport, CRITERIA, HARNESSES,
    SUITE_BUDGET_SECS,
};
pub use tracking::{
    dither_fixed_point, tracking_harness, Drift, FixedPointConfig, FixedPointResult, TrackingConfig, TrackingResult,
};
pub use windows::{
    nonconvex_trend, pl_contraction, pl_with_samples, window_composition_harness, PlConfig, PlResult, WindowConfig,
    WindowResult,
};

/// Monte-Carlo settings for the sensitivity oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarlo {
    pub samples: usize,
    /// Central-difference half width; `None` uses `step / 100`.
    pub eps: Option<f64>,
    pub seed: u64,
}

impl MonteCarlo {
    pub fn new(samples: usize, seed: u64) -> Self {
        MonteCarlo { samples, eps: None, seed }
    }

    pub fn sensitivity(&self, quantizer: &Quantizer, w: &[f64]) -> Result<McEstimate> {
        quantizer.mean_field_sensitivity_stats(w, self.eps, self.samples, self.seed)
    }
}

/// Per-group means of a per-coordinate estimate, with standard errors of
/// the means (coordinates are estimated independently).
pub fn group_means(quantizer: &Quantizer, est: &McEstimate) -> McEstimate {
    let mut mean = Vec::with_capacity(quantizer.layout.num_groups());
    let mut std_err = Vec::with_capacity(quantizer.layout.num_groups());
    for range in quantizer.layout.bounds() {
        let k = range.len().max(1) as f64;
        mean.push(est.mean[range.clone()].iter().sum::<f64>() / k);
        std_err.push(est.std_err[range.clone()].iter().map(|s| s * s).sum::<f64>().sqrt() / k);
    }
    McEstimate { mean, std_err }
}

/// `g† = J v̄` with the Monte-Carlo sensitivity.
pub fn target_gradient(quantizer: &Quantizer, w: &[f64], v_bar: &[f64], mc: &MonteCarlo) -> Result<McEstimate> {
    if v_bar.len() != w.len() {
        return Err(Error::LengthMismatch { expected: w.len(), got: v_bar.len() });
    }
    let j = mc.sensitivity(quantizer, w)?;
    Ok(McEstimate {
        mean: j.mean.iter().zip(v_bar).map(|(a, b)| a * b).collect(),
        std_err: j.std_err.iter().zip(v_bar).map(|(s, b)| s * b.abs()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub j_hat: Vec<f64>,
    pub j_std_err: Vec<f64>,
    /// `max_i |1 - J_i|`.
    pub gamma: f64,
    /// `||B v̄ - J v̄||`.
    pub bias_jacquant: f64,
    /// `||v̄ - J v̄||`.
    pub bias_ste: f64,
    /// `max_i |b_group(i) - J_i| * ||v̄||`.
    pub bound_jacquant: f64,
    /// `gamma * ||v̄||`.
    pub bound_ste: f64,
    /// Four standard errors of `J v̄`, in norm.
    pub mc_tolerance: f64,
    pub holds_jacquant: bool,
    pub holds_ste: bool,
    pub fd_mismatch_var_jacquant: f64,
    pub fd_mismatch_var_ste: f64,
    /// Running sup of `||B - J|| ||v̄||` over the points absorbed so far.
    pub epsilon_sup: f64,
}

impl DiagnosticsReport {
    /// Folds another evaluation point into the running `epsilon_sup`.
    pub fn absorb(&mut self, other: &DiagnosticsReport) {
        self.epsilon_sup = self.epsilon_sup.max(other.epsilon_sup);
    }
}

pub fn bias_report(
    quantizer: &Quantizer,
    w: &[f64],
    gains: &SurrogateJacobian,
    v_bar: &[f64],
    mc: &MonteCarlo,
) -> Result<DiagnosticsReport> {
    let layout = &quantizer.layout;
    if gains.num_groups() != layout.num_groups() {
        return Err(Error::LengthMismatch { expected: layout.num_groups(), got: gains.num_groups() });
    }
    if v_bar.len() != w.len() {
        return Err(Error::LengthMismatch { expected: w.len(), got: v_bar.len() });
    }
    let j = mc.sensitivity(quantizer, w)?;
    let mut jq = 0.0;
    let mut ste = 0.0;
    let mut tol = 0.0;
    let mut gamma: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    for (i, (&ji, &vi)) in j.mean.iter().zip(v_bar).enumerate() {
        let b = gains.gains[layout.group_of(i)];
        jq += ((b - ji) * vi).powi(2);
        ste += ((1.0 - ji) * vi).powi(2);
        tol += (j.std_err[i] * vi).powi(2);
        gamma = gamma.max((1.0 - ji).abs());
        max_gap = max_gap.max((b - ji).abs());
    }
    let (jq, ste, tol) = (jq.sqrt(), ste.sqrt(), 4.0 * tol.sqrt());
    let v_norm = norm(v_bar);
    Ok(DiagnosticsReport {
        gamma,
        bias_jacquant: jq,
        bias_ste: ste,
        bound_jacquant: max_gap * v_norm,
        bound_ste: gamma * v_norm,
        mc_tolerance: tol,
        holds_jacquant: jq <= max_gap * v_norm + tol,
        holds_ste: ste <= gamma * v_norm + tol,
        fd_mismatch_var_jacquant: 0.0,
        fd_mismatch_var_ste: 0.0,
        epsilon_sup: max_gap * v_norm,
        j_hat: j.mean,
        j_std_err: j.std_err,
    })
}

/// Central difference of the hard quantizer at the sampled coordinates.
/// Entries are `0` or a multiple of `step / (2 eps)`.
pub fn fd_reference(quantizer: &Quantizer, w: &[f64], eps: f64, coords: &[usize]) -> Result<Vec<(usize, f64)>> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    coords
        .iter()
        .map(|&i| {
            let wi = *w.get(i).ok_or(Error::IndexOutOfRange { index: i, n: w.len() })?;
            let step = quantizer.step_of(i);
            let up = quantizer.quantize_value(wi + eps, step);
            let down = quantizer.quantize_value(wi - eps, step);
            Ok((i, (up - down) / (2.0 * eps)))
        })
        .collect()
}

/// One training-trace sample for [`fd_mismatch_variance`].
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub w: Vec<f64>,
    pub gains: Vec<f64>,
    pub v_bar: Vec<f64>,
}

/// Variance across the sampled coordinates of `rule_i - J_FD_i v̄_i` at each
/// trace step, averaged over steps, for `rule = B v̄` and `rule = v̄`.
pub fn fd_mismatch_variance(
    quantizer: &Quantizer,
    trace: &[TracePoint],
    eps: f64,
    coords: &[usize],
) -> Result<(f64, f64)> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let mut jq_var = Vec::with_capacity(trace.len());
    let mut ste_var = Vec::with_capacity(trace.len());
    for p in trace {
        if p.gains.len() != quantizer.layout.num_groups() {
            return Err(Error::LengthMismatch { expected: quantizer.layout.num_groups(), got: p.gains.len() });
        }
        let mut jq = Vec::with_capacity(coords.len());
        let mut ste = Vec::with_capacity(coords.len());
        for (i, fd) in fd_reference(quantizer, &p.w, eps, coords)? {
            let v = p.v_bar[i];
            let reference = fd * v;
            jq.push(p.gains[quantizer.layout.group_of(i)] * v - reference);
            ste.push(v - reference);
        }
        jq_var.push(variance(&jq));
        ste_var.push(variance(&ste));
    }
    Ok((mean(&jq_var), mean(&ste_var)))
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

/// Least-squares slope of `log y` against `log x`; `None` if any value is
/// not strictly positive.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || x.iter().chain(y).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return None;
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// A named pass/fail check with the value it measured.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: format!("<= {threshold}"),
        }
    }

    pub fn at_least(name: &str, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            passed: measured >= threshold,
            measured,
            threshold,
            detail: format!(">= {threshold}"),
        }
    }

    pub fn below(name: &str, measured: f64, threshold: f64) -> Self {
        Check { name: name.into(), passed: measured < threshold, measured, threshold, detail: format!("< {threshold}") }
    }

    pub fn within(name: &str, measured: f64, lo: f64, hi: f64) -> Self {
        Check {
            name: name.into(),
            passed: measured >= lo && measured <= hi,
            measured,
            threshold: hi,
            detail: format!("in [{lo}, {hi}]"),
        }
    }

    pub fn flag(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            measured: f64::from(u8::from(passed)),
            threshold: 1.0,
            detail: detail.into(),
        }
    }

    /// `wins` out of `total` seeds must satisfy a comparison.
    pub fn seeds(name: &str, wins: usize, total: usize, needed: usize) -> Self {
        Check {
            name: name.into(),
            passed: wins >= needed,
            measured: wins as f64,
            threshold: needed as f64,
            detail: format!("{wins}/{total} seeds, need >= {needed}"),
        }
    }
}

/// A CSV-ready numeric table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Result of one harness: its table and verdict.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HarnessOutput {
    pub name: String,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub elapsed_secs: f64,
    #[serde(skip)]
    pub table: Table,
}

impl HarnessOutput {
    pub fn new(name: &str, checks: Vec<Check>, table: Table, started: Instant) -> Self {
        HarnessOutput {
            name: name.into(),
            passed: checks.iter().all(|c| c.passed),
            checks,
            elapsed_secs: started.elapsed().as_secs_f64(),
            table,
        }
    }
}
