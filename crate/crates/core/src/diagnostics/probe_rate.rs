//! Error of the least-squares probe slope against the number of probes.

use std::time::Instant;

use serde::Serialize;

use super::{group_means, loglog_slope, Check, HarnessOutput, MonteCarlo, Table};
use crate::jacobian::{slope_estimates, Estimator, ProbeConfig, ProbeScale, DEFAULT_REG_EPS};
use crate::quant::{BitsMode, QuantSpec, Quantizer};
use crate::rng::mix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRateConfig {
    pub spec: QuantSpec,
    pub group_dim: usize,
    /// Probe standard deviation in weight units.
    pub sigma: f64,
    pub m_grid: Vec<usize>,
    pub trials: usize,
    /// Share of the group placed deep in saturation.
    pub saturated_share: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for ProbeRateConfig {
    fn default() -> Self {
        ProbeRateConfig {
            spec: QuantSpec::new(BitsMode::Generic(4), 1.0, 64).expect("valid spec"),
            group_dim: 64,
            sigma: 0.5,
            m_grid: vec![16, 64, 256, 1024],
            trials: 200,
            saturated_share: 0.25,
            mc_samples: 250_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRateResult {
    pub target: f64,
    pub target_std_err: f64,
    pub mean_error: Vec<f64>,
    pub slope: Option<f64>,
}

/// One group of weights for which the Gaussian-probe target coincides with
/// the mean-field group mean: interior weights at evenly spread bin phases,
/// at least `4 sigma` inside the outermost threshold, and saturated weights
/// at least `4 sigma` beyond it.
pub fn probe_rate_weights(spec: &QuantSpec, group_dim: usize, sigma: f64, saturated_share: f64) -> Result<Vec<f64>> {
    let step = spec.step;
    let n_sat = (saturated_share * group_dim as f64).round() as usize;
    let n_int = group_dim - n_sat;
    if spec.bits_mode == BitsMode::Identity {
        return Ok((0..group_dim).map(|j| -4.0 * step + 8.0 * step * (j as f64 + 0.5) / group_dim as f64).collect());
    }
    let outer = (spec.clip_codes as f64 - 0.5) * step;
    let periods = ((outer - 4.0 * sigma) / step).floor();
    if periods < 1.0 || n_int == 0 {
        return Err(Error::InvalidArgument(format!(
            "no interior window of whole bins at least 4 sigma = {} inside the clip level",
            4.0 * sigma
        )));
    }
    let half = periods * step;
    let mut w: Vec<f64> = (0..n_int).map(|j| -half + 2.0 * half * (j as f64 + 0.5) / n_int as f64).collect();
    let far = outer + 4.0 * sigma + 2.0 * step;
    w.extend((0..n_sat).map(|j| {
        let mag = far + step * (j as f64 / n_sat.max(1) as f64);
        if j % 2 == 0 {
            mag
        } else {
            -mag
        }
    }));
    Ok(w)
}

/// Mean `|b_hat - J_bar|` of the least-squares probe slope for each `m`,
/// and the fitted log-log slope.
pub fn probe_rate_harness(cfg: &ProbeRateConfig) -> Result<ProbeRateResult> {
    if cfg.m_grid.len() < 3 {
        return Err(Error::InvalidArgument("m grid needs at least 3 entries".into()));
    }
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let w = probe_rate_weights(&cfg.spec, cfg.group_dim, cfg.sigma, cfg.saturated_share)?;
    let spec = QuantSpec { group_size: w.len(), ..cfg.spec };
    let quantizer = Quantizer::uniform(spec, w.len())?;
    let mc = MonteCarlo { samples: cfg.mc_samples, eps: Some(spec.step / 10.0), seed: mix(cfg.seed, 0xa11) };
    let target = group_means(&quantizer, &mc.sensitivity(&quantizer, &w)?);
    let j_bar = target.mean[0];

    let mean_error = cfg
        .m_grid
        .iter()
        .map(|&m| {
            let probe = ProbeConfig {
                sigma: ProbeScale::Absolute(cfg.sigma),
                num_probes: m,
                seed_tag: mix(cfg.seed, m as u64),
            };
            let trials: Vec<usize> = (0..cfg.trials).collect();
            let errors: Result<Vec<f64>> = crate::par_map(&trials, |&t| {
                let est =
                    slope_estimates(&quantizer, &w, &probe, t as u64, Estimator::ProbeLeastSquares, DEFAULT_REG_EPS)?;
                Ok((est[0].unwrap_or(f64::NAN) - j_bar).abs())
            })
            .into_iter()
            .collect();
            Ok(errors?.iter().sum::<f64>() / cfg.trials as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    let ms: Vec<f64> = cfg.m_grid.iter().map(|&m| m as f64).collect();
    Ok(ProbeRateResult {
        target: j_bar,
        target_std_err: target.std_err[0],
        slope: loglog_slope(&ms, &mean_error),
        mean_error,
    })
}

/// The rate check at `sigma` and `2 sigma`.
pub(crate) fn probe_rate_output(cfg: &ProbeRateConfig, lo: f64, hi: f64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut table = Table::new(&["sigma", "m", "mean_error", "target"]);
    let mut checks = Vec::new();
    for (label, sigma) in [("slope", cfg.sigma), ("slope_double_sigma", 2.0 * cfg.sigma)] {
        let res = probe_rate_harness(&ProbeRateConfig { sigma, ..cfg.clone() })?;
        for (m, e) in cfg.m_grid.iter().zip(&res.mean_error) {
            table.push(vec![sigma, *m as f64, *e, res.target]);
        }
        checks.push(Check::within(label, res.slope.unwrap_or(f64::NAN), lo, hi));
    }
    Ok(HarnessOutput::new("probe_rate", checks, table, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_quantizer_has_zero_error() {
        let cfg = ProbeRateConfig {
            spec: QuantSpec::new(BitsMode::Identity, 1.0, 16).unwrap(),
            group_dim: 16,
            trials: 4,
            mc_samples: 100,
            ..Default::default()
        };
        let res = probe_rate_harness(&cfg).unwrap();
        assert!(res.mean_error.iter().all(|e| *e < 1e-12), "{:?}", res.mean_error);
    }

    #[test]
    fn weights_are_interior_or_deep() {
        let spec = QuantSpec::new(BitsMode::Generic(4), 1.0, 64).unwrap();
        let w = probe_rate_weights(&spec, 64, 0.5, 0.25).unwrap();
        assert_eq!(w.len(), 64);
        assert_eq!(w.iter().filter(|x| x.abs() > 7.0).count(), 16);
        assert!(w.iter().all(|x| x.abs() <= 4.0 || x.abs() >= 6.5 + 2.0 + 2.0));
        let w2 = QuantSpec::new(BitsMode::W2, 1.0, 8).unwrap();
        assert!(probe_rate_weights(&w2, 8, 0.5, 0.0).is_err());
    }

    #[test]
    fn short_grid_rejected() {
        let cfg = ProbeRateConfig { m_grid: vec![1, 2], ..Default::default() };
        assert!(probe_rate_harness(&cfg).is_err());
    }
}
