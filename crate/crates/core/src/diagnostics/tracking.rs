//! Gain learning on frozen and drifting weights.

use std::time::Instant;

use serde::Serialize;

use super::{group_means, mean, Check, HarnessOutput, MonteCarlo, Table};
use crate::jacobian::{Estimator, ProbeConfig, ProbeScale, SurrogateJacobian};
use crate::quant::{BitsMode, QuantSpec, Quantizer};
use crate::rng::mix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointConfig {
    pub spec: QuantSpec,
    pub groups: usize,
    pub group_dim: usize,
    pub sigma: f64,
    pub ema_rate: f64,
    pub updates: usize,
    pub tolerance: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        FixedPointConfig {
            spec: QuantSpec::new(BitsMode::Generic(3), 1.0, 64).expect("valid spec"),
            groups: 8,
            group_dim: 64,
            sigma: 0.5,
            ema_rate: 0.01,
            updates: 2000,
            tolerance: 0.05,
            mc_samples: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointResult {
    pub targets: Vec<f64>,
    pub target_std_err: Vec<f64>,
    pub gains: Vec<f64>,
    /// `max_g |b_g - J_bar_g|` after the last update.
    pub max_error: f64,
    /// First update after which every group stays within tolerance.
    pub settled_at: Option<usize>,
}

/// Frozen weights mixing interior coordinates (`|w| <= (c-1)Δ` and at least
/// `4 sigma` inside the clip level) with saturated ones (`|w| >= (c+1)Δ`
/// and at least `4 sigma` beyond it); the saturated share varies across
/// groups from 1/4 to 3/4.
fn mixed_weights(spec: &QuantSpec, groups: usize, group_dim: usize, sigma: f64) -> Result<Vec<f64>> {
    let step = spec.step;
    let c = spec.clip_codes as f64;
    let inner = ((c - 1.0) * step).min(c * step - 4.0 * sigma);
    let outer = ((c + 1.0) * step).max(c * step + 4.0 * sigma);
    if inner < 0.0 {
        return Err(Error::InvalidArgument(format!("sigma = {sigma} leaves no interior region")));
    }
    let mut w = Vec::with_capacity(groups * group_dim);
    for g in 0..groups {
        let share = if groups == 1 { 0.5 } else { 0.25 + 0.5 * g as f64 / (groups - 1) as f64 };
        let n_sat = (share * group_dim as f64).round() as usize;
        let n_int = group_dim - n_sat;
        w.extend((0..n_int).map(|j| -inner + 2.0 * inner * (j as f64 + 0.5) / n_int as f64));
        w.extend((0..n_sat).map(|j| {
            let mag = outer + step * j as f64 / n_sat as f64;
            if j % 2 == 0 {
                mag
            } else {
                -mag
            }
        }));
    }
    Ok(w)
}

/// Iterates `dither_update` on frozen mixed-saturation weights.
pub fn dither_fixed_point(cfg: &FixedPointConfig) -> Result<FixedPointResult> {
    let w = mixed_weights(&cfg.spec, cfg.groups, cfg.group_dim, cfg.sigma)?;
    let quantizer = Quantizer::uniform(QuantSpec { group_size: cfg.group_dim, ..cfg.spec }, w.len())?;
    let mc = MonteCarlo { samples: cfg.mc_samples, eps: Some(cfg.spec.step / 10.0), seed: mix(cfg.seed, 0xf1) };
    let target = group_means(&quantizer, &mc.sensitivity(&quantizer, &w)?);
    let probe = ProbeConfig { sigma: ProbeScale::Absolute(cfg.sigma), num_probes: 1, seed_tag: cfg.seed };
    let mut gains = SurrogateJacobian::identity(cfg.groups, cfg.ema_rate)?;
    let mut settled_at = None;
    for k in 1..=cfg.updates {
        gains.dither_update(&quantizer, &w, &probe, k as u64)?;
        let within = gains.gains.iter().zip(&target.mean).all(|(b, j)| (b - j).abs() <= cfg.tolerance);
        match (within, settled_at) {
            (true, None) => settled_at = Some(k),
            (false, Some(_)) => settled_at = None,
            _ => {}
        }
    }
    let max_error = gains.gains.iter().zip(&target.mean).map(|(b, j)| (b - j).abs()).fold(0.0, f64::max);
    Ok(FixedPointResult {
        targets: target.mean,
        target_std_err: target.std_err,
        gains: gains.gains,
        max_error,
        settled_at,
    })
}

pub(crate) fn fixed_point_output(cfg: &FixedPointConfig) -> Result<HarnessOutput> {
    let started = Instant::now();
    let res = dither_fixed_point(cfg)?;
    let mut table = Table::new(&["group", "gain", "target", "target_std_err"]);
    for g in 0..res.gains.len() {
        table.push(vec![g as f64, res.gains[g], res.targets[g], res.target_std_err[g]]);
    }
    let checks = vec![
        Check::at_most("max_group_error", res.max_error, cfg.tolerance),
        Check::flag(
            "settled_within_budget",
            res.settled_at.is_some(),
            format!("settled at update {:?} of {}", res.settled_at, cfg.updates),
        ),
    ];
    Ok(HarnessOutput::new("dither_fixed_point", checks, table, started))
}

/// How the weights move while the gains track them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Drift {
    Static,
    /// Drift stepsize `eta_t = beta_t^power`.
    Power(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingConfig {
    pub spec: QuantSpec,
    pub group_dim: usize,
    pub sigma: f64,
    /// `beta_t = beta0 * (t + 1)^(-beta_decay)`, capped at 1.
    pub beta0: f64,
    pub beta_decay: f64,
    pub drift: Drift,
    /// Shift amplitude of the weights, in weight units.
    pub amplitude: f64,
    pub steps: usize,
    pub eval_every: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            spec: QuantSpec::new(BitsMode::Generic(3), 1.0, 64).expect("valid spec"),
            group_dim: 64,
            sigma: 0.5,
            beta0: 0.5,
            beta_decay: 0.5,
            drift: Drift::Static,
            amplitude: 1.0,
            steps: 4000,
            eval_every: 10,
            mc_samples: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrackingResult {
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    pub targets: Vec<f64>,
    pub gains: Vec<f64>,
    /// Mean error over the last 10% of evaluations.
    pub terminal_error: f64,
}

/// One group of weights evenly spread over `[0, 2cΔ]` and shifted by
/// `amplitude * sin(theta_t)`, so the share inside the clip level changes
/// with the shift. The phase advances by the drift stepsize.
pub fn tracking_harness(cfg: &TrackingConfig) -> Result<TrackingResult> {
    if cfg.steps == 0 || cfg.eval_every == 0 {
        return Err(Error::InvalidArgument("steps and eval_every must be >= 1".into()));
    }
    if !(cfg.beta0 > 0.0 && cfg.beta0 <= 1.0) {
        return Err(Error::InvalidArgument("beta0 must be in (0, 1]".into()));
    }
    let span = 2.0 * cfg.spec.clip_codes as f64 * cfg.spec.step;
    let d = cfg.group_dim;
    let base: Vec<f64> = (0..d).map(|j| span * (j as f64 + 0.5) / d as f64).collect();
    let quantizer = Quantizer::uniform(QuantSpec { group_size: d, ..cfg.spec }, d)?;
    let mut probe = ProbeConfig { sigma: ProbeScale::Absolute(cfg.sigma), num_probes: 1, seed_tag: cfg.seed };
    let mut gains = SurrogateJacobian::identity(1, cfg.beta0)?;
    let mut theta = 0.0f64;
    let mut w = base.clone();
    let mut out = TrackingResult { steps: vec![], errors: vec![], targets: vec![], gains: vec![], terminal_error: 0.0 };
    for t in 0..cfg.steps {
        let beta = (cfg.beta0 * ((t + 1) as f64).powf(-cfg.beta_decay)).min(1.0);
        gains.ema_rate = beta;
        probe.seed_tag = cfg.seed;
        gains.update(&quantizer, &w, &probe, t as u64, Estimator::Dither)?;
        if (t + 1) % cfg.eval_every == 0 {
            let mc =
                MonteCarlo { samples: cfg.mc_samples, eps: Some(cfg.spec.step / 10.0), seed: mix(cfg.seed, t as u64) };
            let target = group_means(&quantizer, &mc.sensitivity(&quantizer, &w)?).mean[0];
            out.steps.push(t + 1);
            out.targets.push(target);
            out.gains.push(gains.gains[0]);
            out.errors.push((gains.gains[0] - target).abs());
        }
        if let Drift::Power(p) = cfg.drift {
            theta += beta.powf(p);
            let shift = cfg.amplitude * theta.sin();
            w.iter_mut().zip(&base).for_each(|(wi, b)| *wi = b + shift);
        }
    }
    let tail = (out.errors.len() / 10).max(1);
    out.terminal_error = mean(&out.errors[out.errors.len() - tail..]);
    Ok(out)
}

pub(crate) fn tracking_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut table = Table::new(&["drift", "step", "error", "target", "gain"]);
    let mut terminal = Vec::new();
    for (code, drift) in [(0.0, Drift::Static), (1.0, Drift::Power(2.0)), (2.0, Drift::Power(1.0))] {
        let res = tracking_harness(&TrackingConfig { drift, seed, ..Default::default() })?;
        for k in 0..res.steps.len() {
            table.push(vec![code, res.steps[k] as f64, res.errors[k], res.targets[k], res.gains[k]]);
        }
        terminal.push(res.terminal_error);
    }
    let checks = vec![
        Check::at_most("static_terminal_error", terminal[0], 0.05),
        Check::below("slow_minus_fast_terminal_error", terminal[1] - terminal[2], 0.0),
    ];
    Ok(HarnessOutput::new("tracking", checks, table, started))
}
