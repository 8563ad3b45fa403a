//! Learned surrogate Jacobian: one scalar gain per quantization group.
//!
//! Gains start at 1 (the straight-through gain) and are moved towards slope
//! estimates of the quantizer's local response by an exponential moving
//! average with clipping to `[clip_lo, clip_hi]`:
//!
//! ```text
//! b_g <- (1 - beta) * b_g + beta * clip(b_hat_g, clip_lo, clip_hi)
//! ```
//!
//! Three estimators of `b_hat_g` are provided: a regularised one-step probe
//! slope fit, a scalar least-squares fit over several probes, and a probe
//! slope fit through the subtractively dithered quantizer using common
//! random dither for both evaluations.

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::quant::{GroupLayout, Quantizer};
use crate::rng::{mix, stream_rng, Stream};
use crate::{Error, Result};

pub const DEFAULT_REG_EPS: f64 = 1e-8;
pub const DEFAULT_EMA_RATE: f64 = 0.9;

/// Probe standard deviation, absolute or as a fraction of the group step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeScale {
    Absolute(f64),
    StepFraction(f64),
}

impl ProbeScale {
    pub fn sigma(self, step: f64) -> f64 {
        match self {
            ProbeScale::Absolute(s) => s,
            ProbeScale::StepFraction(f) => f * step,
        }
    }

    fn value(self) -> f64 {
        match self {
            ProbeScale::Absolute(s) | ProbeScale::StepFraction(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub sigma: ProbeScale,
    pub num_probes: usize,
    pub seed_tag: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { sigma: ProbeScale::StepFraction(0.5), num_probes: 1, seed_tag: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let s = self.sigma.value();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidArgument(format!("probe sigma must be positive, got {s}")));
        }
        if self.num_probes == 0 {
            return Err(Error::InvalidArgument("num_probes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Which slope statistic feeds the EMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    /// Mean over probes of `<dq, delta> / (|delta|^2 + eps)`.
    Probe,
    /// `sum_k <dq_k, delta_k> / sum_k |delta_k|^2`.
    ProbeLeastSquares,
    /// As `Probe`, but both evaluations go through `Q(. + r) - r` with a
    /// shared dither `r`.
    Dither,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateJacobian {
    pub gains: Vec<f64>,
    pub ema_rate: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub reg_eps: f64,
}

impl SurrogateJacobian {
    /// Straight-through start: every gain is 1.
    pub fn identity(num_groups: usize, ema_rate: f64) -> Result<Self> {
        SurrogateJacobian::from_gains(vec![1.0; num_groups], ema_rate, 0.0, 1.0)
    }

    pub fn from_gains(gains: Vec<f64>, ema_rate: f64, clip_lo: f64, clip_hi: f64) -> Result<Self> {
        let jac = SurrogateJacobian { gains, ema_rate, clip_lo, clip_hi, reg_eps: DEFAULT_REG_EPS };
        jac.validate()?;
        Ok(jac)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("ema_rate must be in (0, 1], got {}", self.ema_rate)));
        }
        if !(self.clip_lo.is_finite() && self.clip_hi.is_finite() && self.clip_lo <= self.clip_hi) {
            return Err(Error::InvalidArgument(format!(
                "invalid gain clip range [{}, {}]",
                self.clip_lo, self.clip_hi
            )));
        }
        if !(self.reg_eps >= 0.0) {
            return Err(Error::InvalidArgument("reg_eps must be >= 0".into()));
        }
        if self.gains.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("gains must be finite".into()));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.gains.len()
    }

    /// `b <- (1 - beta) b + beta clip(estimate)` for one group.
    pub fn ema_step(&mut self, g: usize, estimate: f64) {
        let target = estimate.clamp(self.clip_lo, self.clip_hi);
        let b = (1.0 - self.ema_rate) * self.gains[g] + self.ema_rate * target;
        self.gains[g] = b.clamp(self.clip_lo, self.clip_hi);
    }

    /// `output_i = b_{group(i)} * v_i`.
    pub fn apply(&self, v: &[f64], layout: &GroupLayout) -> Result<Vec<f64>> {
        let mut out = vec![0.0; v.len()];
        self.apply_into(v, layout, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, v: &[f64], layout: &GroupLayout, out: &mut [f64]) -> Result<()> {
        if v.len() != layout.len() {
            return Err(Error::LengthMismatch { expected: layout.len(), got: v.len() });
        }
        if self.gains.len() != layout.num_groups() {
            return Err(Error::LengthMismatch { expected: layout.num_groups(), got: self.gains.len() });
        }
        for (g, range) in layout.bounds().iter().enumerate() {
            let b = self.gains[g];
            for i in range.clone() {
                out[i] = b * v[i];
            }
        }
        Ok(())
    }

    pub fn probe_update(&mut self, q: &Quantizer, w: &[f64], cfg: &ProbeConfig, key: u64) -> Result<()> {
        self.update(q, w, cfg, key, Estimator::Probe)
    }

    pub fn probe_ls_update(&mut self, q: &Quantizer, w: &[f64], cfg: &ProbeConfig, key: u64) -> Result<()> {
        self.update(q, w, cfg, key, Estimator::ProbeLeastSquares)
    }

    pub fn dither_update(&mut self, q: &Quantizer, w: &[f64], cfg: &ProbeConfig, key: u64) -> Result<()> {
        self.update(q, w, cfg, key, Estimator::Dither)
    }

    pub fn update(&mut self, q: &Quantizer, w: &[f64], cfg: &ProbeConfig, key: u64, est: Estimator) -> Result<()> {
        if self.gains.len() != q.layout.num_groups() {
            return Err(Error::LengthMismatch { expected: q.layout.num_groups(), got: self.gains.len() });
        }
        let estimates = slope_estimates(q, w, cfg, key, est, self.reg_eps)?;
        for (g, e) in estimates.into_iter().enumerate() {
            if let Some(e) = e {
                self.ema_step(g, e);
            }
        }
        Ok(())
    }
}

/// Raw (unclipped) per-group slope estimates; `None` for empty groups.
///
/// Group `g` draws from its own stream keyed by `(cfg.seed_tag, key, g)`.
pub fn slope_estimates(
    q: &Quantizer,
    w: &[f64],
    cfg: &ProbeConfig,
    key: u64,
    est: Estimator,
    reg_eps: f64,
) -> Result<Vec<Option<f64>>> {
    cfg.validate()?;
    if w.len() != q.len() {
        return Err(Error::LengthMismatch { expected: q.len(), got: w.len() });
    }
    crate::quant::check_finite(w)?;
    let seed = mix(cfg.seed_tag, key);
    let mut out = Vec::with_capacity(q.layout.num_groups());
    let mut delta = Vec::new();
    for (g, range) in q.layout.bounds().iter().enumerate() {
        if range.is_empty() {
            warn!("skipping empty group {g}");
            out.push(None);
            continue;
        }
        let step = q.steps()[g];
        let sigma = cfg.sigma.sigma(step);
        let half = step / 2.0;
        let wg = &w[range.clone()];
        let mut rng = stream_rng(seed, Stream::Probe, g as u64);
        delta.resize(wg.len(), 0.0);
        let (mut cross_sum, mut energy_sum, mut slope_sum) = (0.0, 0.0, 0.0);
        for _ in 0..cfg.num_probes {
            for d in delta.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *d = sigma * z;
            }
            let mut cross = 0.0;
            let mut energy = 0.0;
            for (j, &wj) in wg.iter().enumerate() {
                let dj = delta[j];
                let dq = match est {
                    Estimator::Dither => {
                        let r = rng.random_range(-half..=half);
                        (q.quantize_value(wj + dj + r, step) - r) - (q.quantize_value(wj + r, step) - r)
                    }
                    _ => q.quantize_value(wj + dj, step) - q.quantize_value(wj, step),
                };
                cross += dq * dj;
                energy += dj * dj;
            }
            cross_sum += cross;
            energy_sum += energy;
            slope_sum += cross / (energy + reg_eps);
        }
        let estimate = match est {
            Estimator::ProbeLeastSquares => {
                if energy_sum == 0.0 {
                    return Err(Error::ZeroExcitation(g));
                }
                cross_sum / energy_sum
            }
            _ => slope_sum / cfg.num_probes as f64,
        };
        out.push(Some(estimate));
    }
    Ok(out)
}
