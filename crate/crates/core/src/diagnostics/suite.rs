//! Named harnesses, the acceptance criteria built on them, and the
//! `verify_all` aggregate.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::dominance::{dominance_output, DominanceConfig};
use super::probe_rate::{probe_rate_output, ProbeRateConfig};
use super::tracking::{fixed_point_output, tracking_output, FixedPointConfig};
use super::windows::{nonconvex_output, pl_output, window_output};
use super::{bias_report, fd_reference, group_means, Check, HarnessOutput, MonteCarlo, Table};
use crate::jacobian::SurrogateJacobian;
use crate::metrics::metrics_csv;
use crate::objectives::linear_regression;
use crate::quant::{BitsMode, QuantSpec, Quantizer, ScaleMode};
use crate::rng::{mix, stream_rng, Stream};
use crate::trainer::{train_vr, JacMode, Refresh, TrainConfig};
use crate::vrgrad::{estimator_variance, sample_batch, SurrogateProblem, VarianceSetup, VrMode, VrState};
use crate::{Error, Result};

/// Harness names accepted by [`run_harness`].
pub const HARNESSES: &[&str] = &[
    "quantizer",
    "probe_rate",
    "dither_fixed_point",
    "vr_variance",
    "pl_contraction",
    "dominance",
    "tracking",
    "window_composition",
    "reduction",
    "bias_bounds",
    "nonconvex_trend",
];

/// An acceptance criterion: a harness plus a wall-time budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Criterion {
    pub id: &'static str,
    pub harness: &'static str,
    pub budget_secs: f64,
}

pub const CRITERIA: &[Criterion] = &[
    Criterion { id: "A1", harness: "quantizer", budget_secs: 10.0 },
    Criterion { id: "A2", harness: "probe_rate", budget_secs: 60.0 },
    Criterion { id: "A3", harness: "dither_fixed_point", budget_secs: 60.0 },
    Criterion { id: "A4", harness: "vr_variance", budget_secs: 60.0 },
    Criterion { id: "A5", harness: "pl_contraction", budget_secs: 30.0 },
    Criterion { id: "A6", harness: "dominance", budget_secs: 300.0 },
    Criterion { id: "A7", harness: "tracking", budget_secs: 60.0 },
    Criterion { id: "A8", harness: "window_composition", budget_secs: 60.0 },
    Criterion { id: "A9", harness: "reduction", budget_secs: 600.0 },
];

/// Wall-time budget for the whole suite.
pub const SUITE_BUDGET_SECS: f64 = 600.0;

fn seeds(seed: u64) -> Vec<u64> {
    (0..5).map(|k| mix(seed, 100 + k)).collect()
}

pub fn run_harness(name: &str, seed: u64) -> Result<HarnessOutput> {
    match name {
        "quantizer" => quantizer_output(seed),
        "probe_rate" => probe_rate_output(&ProbeRateConfig { seed, ..Default::default() }, -0.65, -0.35),
        "dither_fixed_point" => fixed_point_output(&FixedPointConfig { seed, ..Default::default() }),
        "vr_variance" => vr_variance_output(seed),
        "pl_contraction" => pl_output(&seeds(seed)),
        "dominance" => dominance_output(&DominanceConfig::default(), &seeds(seed)),
        "tracking" => tracking_output(seed),
        "window_composition" => window_output(&seeds(seed)),
        "reduction" => reduction_output(seed),
        "bias_bounds" => bias_output(seed),
        "nonconvex_trend" => nonconvex_output(seed),
        other => Err(Error::InvalidArgument(format!("unknown harness {other:?}; known: {}", HARNESSES.join(", ")))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriterionResult {
    pub id: String,
    pub budget_secs: f64,
    pub within_budget: bool,
    pub passed: bool,
    /// Set when the harness itself failed to run.
    pub error: Option<String>,
    pub output: Option<HarnessOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub passed: bool,
    pub elapsed_secs: f64,
    pub within_budget: bool,
    pub criteria: Vec<CriterionResult>,
    /// Harnesses outside the acceptance list; reported, not gating.
    pub extras: Vec<CriterionResult>,
}

impl SuiteReport {
    pub fn hard_failures(&self) -> usize {
        self.criteria.iter().filter(|c| !c.passed).count() + usize::from(!self.within_budget)
    }
}

fn evaluate(id: &str, harness: &str, budget: f64, seed: u64) -> CriterionResult {
    match run_harness(harness, seed) {
        Ok(out) => {
            let within_budget = out.elapsed_secs < budget;
            CriterionResult {
                id: id.into(),
                budget_secs: budget,
                within_budget,
                passed: out.passed && within_budget,
                error: None,
                output: Some(out),
            }
        }
        Err(e) => CriterionResult {
            id: id.into(),
            budget_secs: budget,
            within_budget: false,
            passed: false,
            error: Some(e.to_string()),
            output: None,
        },
    }
}

/// Runs every acceptance criterion, then the extra harnesses. Harness
/// errors are recorded and the suite continues.
pub fn verify_all(seed: u64, on_result: &mut dyn FnMut(&CriterionResult)) -> SuiteReport {
    let started = Instant::now();
    let mut criteria = Vec::new();
    for c in CRITERIA {
        let r = evaluate(c.id, c.harness, c.budget_secs, seed);
        on_result(&r);
        criteria.push(r);
    }
    let mut extras = Vec::new();
    for name in HARNESSES.iter().filter(|h| CRITERIA.iter().all(|c| c.harness != **h)) {
        let r = evaluate(name, name, SUITE_BUDGET_SECS, seed);
        on_result(&r);
        extras.push(r);
    }
    let elapsed_secs = started.elapsed().as_secs_f64();
    let within_budget = elapsed_secs < SUITE_BUDGET_SECS;
    SuiteReport {
        seed,
        passed: within_budget && criteria.iter().all(|c| c.passed),
        elapsed_secs,
        within_budget,
        criteria,
        extras,
    }
}

const PROPERTY_MODES: &[BitsMode] = &[
    BitsMode::W1,
    BitsMode::W1_58,
    BitsMode::W2,
    BitsMode::W2Asym,
    BitsMode::Generic(3),
    BitsMode::Generic(4),
    BitsMode::Generic(8),
];

fn quantizer_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut rng = stream_rng(seed, Stream::Diagnostics, 1);
    let mut table = Table::new(&["check", "mode", "value"]);
    let (mut on_grid, mut idempotent, mut monotone) = (true, true, true);
    for (m, &mode) in PROPERTY_MODES.iter().enumerate() {
        let step = rng.random_range(0.05..2.0);
        let q = Quantizer::uniform(QuantSpec::new(mode, step, 16)?, 4096)?;
        let c = q.spec.clip_codes as f64;
        let mut w: Vec<f64> = (0..4096).map(|_| rng.random_range(-3.0 * c * step..3.0 * c * step)).collect();
        let out = q.quantize(&w)?;
        let (lo, hi) = if mode == BitsMode::W1 { (-step, step) } else { q.responsive_range(0) };
        for &x in &out {
            let code = x / step;
            on_grid &= (code - code.round()).abs() < 1e-9 && x >= lo - 1e-12 && x <= hi + 1e-12;
        }
        idempotent &= q.quantize(&out)? == out;
        // monotone within a group: sort one group's inputs
        w[..16].sort_by(f64::total_cmp);
        let sorted = q.quantize(&w)?;
        monotone &= sorted[..16].windows(2).all(|p| p[0] <= p[1]);
        table.push(vec![0.0, m as f64, f64::from(u8::from(on_grid && idempotent && monotone))]);
    }

    // dither unbiasedness at interior points, n = 1e5
    let q = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 1.0, 8)?, 8)?;
    let interior: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
    let est = q.mean_field_stats(&interior, 100_000, mix(seed, 1))?;
    let mut worst_z: f64 = 0.0;
    for i in 0..8 {
        let z = (est.mean[i] - interior[i]).abs() / est.std_err[i].max(1e-300);
        worst_z = worst_z.max(z);
        table.push(vec![1.0, i as f64, z]);
    }

    // sensitivity range
    let probe: Vec<f64> = (0..8).map(|_| rng.random_range(-9.0..9.0)).collect();
    let j = q.mean_field_sensitivity_stats(&probe, None, 20_000, mix(seed, 2))?;
    let sens_ok = j.mean.iter().zip(&j.std_err).all(|(m, s)| *m >= 0.0 && *m <= 1.0 + 4.0 * s + 1e-12);

    // finite-difference sparsity: P(nonzero) = 2 eps / step for uniform w
    let n = 100_000;
    let qs = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 1.0, n)?, n)?;
    let ws: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let coords: Vec<usize> = (0..n).collect();
    let eps = 0.1;
    let hits = fd_reference(&qs, &ws, eps, &coords)?.iter().filter(|(_, v)| *v != 0.0).count() as f64;
    let p = 2.0 * eps;
    let z_fd = (hits - n as f64 * p).abs() / (n as f64 * p * (1.0 - p)).sqrt();
    table.push(vec![2.0, 0.0, hits / n as f64]);

    let checks = vec![
        Check::flag("grid_membership", on_grid, "every output is a clipped grid point"),
        Check::flag("idempotence", idempotent, "Q(Q(w)) = Q(w)"),
        Check::flag("monotonicity", monotone, "w <= w' implies Q(w) <= Q(w')"),
        Check::at_most("dither_interior_unbiased_max_z", worst_z, 4.0),
        Check::flag("sensitivity_in_unit_range", sens_ok, "0 <= J <= 1 + 4 se"),
        Check::at_most("fd_sparsity_z", z_fd, 3.0),
    ];
    Ok(HarnessOutput::new("quantizer", checks, table, started))
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Max deviation between the average of `grad_est` over every size-`k`
/// minibatch and the full-batch surrogate gradient at `(w, gains)`.
pub fn exhaustive_deviation(
    problem: &SurrogateProblem<'_>,
    state: &VrState,
    w: &[f64],
    gains: &SurrogateJacobian,
    k: usize,
) -> Result<f64> {
    let all = problem.all_indices();
    let full = problem.mean_term(w, gains, &all)?;
    let batches = combinations(problem.n(), k);
    let mut avg = vec![0.0; problem.dim()];
    for b in &batches {
        let g = state.grad_est(problem, w, gains, b)?;
        avg.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
    }
    let m = batches.len() as f64;
    Ok(avg.iter().zip(&full).map(|(a, f)| (a / m - f).abs()).fold(0.0, f64::max))
}

fn vr_variance_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut table = Table::new(&["seed", "plain_variance", "svrg_variance", "ratio"]);
    let mut wins = 0;
    let all_seeds = seeds(seed);
    for &s in &all_seeds {
        let (obj, _) = linear_regression(64, 16, 0.5, s)?;
        let mut rng = stream_rng(s, Stream::Perturb, 2);
        let anchor: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let quantizer = Quantizer::build(QuantSpec::new(BitsMode::Generic(8), 1.0, 4)?, ScaleMode::MaxAbs, &anchor)?;
        let dir: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale = 0.1 * crate::norm(&anchor) / crate::norm(&dir);
        let w: Vec<f64> = anchor.iter().zip(&dir).map(|(a, d)| a + scale * d).collect();
        let gains = SurrogateJacobian::from_gains(vec![0.9, 0.7, 1.0, 0.5], 0.9, 0.0, 1.0)?;
        let problem = SurrogateProblem::new(&obj, &quantizer)?;
        let setup =
            |mode| VarianceSetup { mode, anchor_w: &anchor, anchor_gains: &gains, w: &w, gains: &gains, batch_size: 4 };
        let plain = estimator_variance(&problem, &setup(VrMode::Plain), 1000, s)?;
        let svrg = estimator_variance(&problem, &setup(VrMode::Svrg), 1000, s)?;
        wins += usize::from(svrg <= 0.5 * plain);
        table.push(vec![s as f64, plain, svrg, svrg / plain]);
    }

    // exact unbiasedness by enumeration
    let mut worst: f64 = 0.0;
    for (n, k) in [(4, 1), (4, 2), (5, 1), (5, 2), (6, 1), (6, 2)] {
        let (obj, _) = linear_regression(n, 3, 0.3, mix(seed, n as u64))?;
        let quantizer = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(3), 0.25, 2)?, 3)?;
        let problem = SurrogateProblem::new(&obj, &quantizer)?;
        let anchor_gains = SurrogateJacobian::from_gains(vec![0.8, 0.4], 0.9, 0.0, 1.0)?;
        let gains = SurrogateJacobian::from_gains(vec![0.6, 1.0], 0.9, 0.0, 1.0)?;
        let anchor = [0.3, -0.2, 0.7];
        let w = [0.1, 0.45, -0.3];
        for mode in [VrMode::Svrg, VrMode::Saga] {
            let mut state = VrState::init(mode, &problem, &anchor, &anchor_gains, &problem.all_indices())?;
            if mode == VrMode::Saga {
                // move part of the table away from the anchor
                state.ctrl_update(&problem, &w, &gains, &[0], &[0.0; 3])?;
            }
            worst = worst.max(exhaustive_deviation(&problem, &state, &w, &gains, k)?);
        }
    }
    let n = all_seeds.len();
    let checks = vec![
        Check::seeds("svrg_variance_at_most_half_plain", wins, n, n.saturating_sub(1).max(1)),
        Check::at_most("exhaustive_unbiasedness_max_deviation", worst, 1e-12),
    ];
    Ok(HarnessOutput::new("vr_variance", checks, table, started))
}

fn reduction_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let (obj, _) = linear_regression(64, 8, 0.3, seed)?;
    let quantizer = Quantizer::uniform(QuantSpec::new(BitsMode::Identity, 1.0, 4)?, 8)?;
    let cfg = TrainConfig {
        stepsize: 0.05,
        batch_size: 4,
        steps: 1000,
        jac_mode: JacMode::Ste,
        vr_mode: VrMode::Plain,
        allow_plain: true,
        seed,
        ..Default::default()
    };
    let w0 = vec![0.25; 8];
    let out = train_vr(&obj, &w0, &quantizer, &cfg)?;
    let mut rng = stream_rng(seed, Stream::Minibatch, 0);
    let mut w = w0.clone();
    let mut table = Table::new(&["step", "max_abs_deviation"]);
    for t in 0..cfg.steps {
        let batch = sample_batch(&mut rng, obj.n_samples(), cfg.batch_size);
        let (_, g) = obj.batch_grad(&w, &batch)?;
        w.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.stepsize * b);
        if (t + 1) % 100 == 0 {
            table.push(vec![(t + 1) as f64, 0.0]);
        }
    }
    let deviation = out.weights.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    for row in &mut table.rows {
        row[1] = deviation;
    }

    let det_cfg = TrainConfig {
        steps: 200,
        refresh: Refresh::Probability(0.1),
        jac_mode: JacMode::Probe,
        vr_mode: VrMode::Saga,
        allow_plain: false,
        ..cfg
    };
    let q2 = Quantizer::build(QuantSpec::new(BitsMode::W2, 1.0, 4)?, ScaleMode::MaxAbs, &w0)?;
    let a = metrics_csv(&train_vr(&obj, &w0, &q2, &det_cfg)?.trace);
    let b = metrics_csv(&train_vr(&obj, &w0, &q2, &det_cfg)?.trace);
    let checks = vec![
        Check::at_most("sgd_reduction_max_deviation", deviation, 1e-8),
        Check::flag("metrics_byte_identical", a == b, "two runs with one seed"),
    ];
    Ok(HarnessOutput::new("reduction", checks, table, started))
}

fn bias_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut rng = stream_rng(seed, Stream::Diagnostics, 3);
    let quantizer = Quantizer::uniform(QuantSpec::new(BitsMode::W2, 1.0, 8)?, 32)?;
    let mc = MonteCarlo::new(20_000, mix(seed, 3));
    let mut table = Table::new(&["draw", "bias_jacquant", "bias_ste", "bound_jacquant", "bound_ste", "eligible"]);
    let (mut bounds_hold, mut eligible, mut dominated) = (true, 0usize, 0usize);
    for draw in 0..20 {
        let w: Vec<f64> = (0..32).map(|_| rng.random_range(-2.5..2.5)).collect();
        let v: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let j = group_means(&quantizer, &mc.sensitivity(&quantizer, &w)?);
        let gains = SurrogateJacobian::from_gains(j.mean.clone(), 0.9, 0.0, 1.0)?;
        let r = bias_report(&quantizer, &w, &gains, &v, &MonteCarlo { seed: mix(seed, 1000 + draw), ..mc })?;
        let ste = bias_report(&quantizer, &w, &SurrogateJacobian::identity(4, 0.9)?, &v, &mc)?;
        bounds_hold &= r.holds_jacquant && r.holds_ste && ste.bias_jacquant == ste.bias_ste;
        let gap = gains.gains.iter().zip(&j.mean).map(|(b, m)| (b - m).abs()).fold(0.0, f64::max);
        let is_eligible = gap <= r.gamma - 0.05;
        if is_eligible {
            eligible += 1;
            dominated += usize::from(r.bias_jacquant <= r.bias_ste + r.mc_tolerance);
        }
        table.push(vec![
            draw as f64,
            r.bias_jacquant,
            r.bias_ste,
            r.bound_jacquant,
            r.bound_ste,
            f64::from(u8::from(is_eligible)),
        ]);
    }
    let checks = vec![
        Check::flag("lemma_bounds_hold", bounds_hold, "bias <= max gap * |v| + tolerance, and b = 1 matches STE"),
        Check::seeds("dominance_when_eligible", dominated, eligible, eligible),
    ];
    Ok(HarnessOutput::new("bias_bounds", checks, table, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(6, 2).len(), 15);
        assert_eq!(combinations(4, 1), vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn unknown_harness_is_an_error() {
        assert!(run_harness("nope", 0).is_err());
    }

    #[test]
    fn every_criterion_names_a_harness() {
        for c in CRITERIA {
            assert!(HARNESSES.contains(&c.harness));
        }
    }
}
