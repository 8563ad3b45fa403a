//! Learned gains against the straight-through rule on a task whose optimum
//! lies partly beyond the clip level.

use std::time::Instant;

use serde::Serialize;

use super::{bias_report, fd_mismatch_variance, Check, HarnessOutput, MonteCarlo, Table, TracePoint};
use crate::objectives::saturating_task;
use crate::quant::{BitsMode, QuantSpec, Quantizer, ScaleMode};
use crate::rng::mix;
use crate::trainer::{self, Algorithm, JacMode, Refresh, Start, TrainConfig};
use crate::vrgrad::VrMode;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceConfig {
    pub n: usize,
    pub dim: usize,
    pub group_size: usize,
    pub saturated_fraction: f64,
    pub noise: f64,
    pub bits: BitsMode,
    pub algorithm: Algorithm,
    pub train: TrainConfig,
    /// Learned-gain mode compared against `Ste`.
    pub jac_mode: JacMode,
    pub mc_samples: usize,
    /// Finite-difference half width as a fraction of the step.
    pub fd_eps_frac: f64,
    pub trace_every: usize,
}

impl Default for DominanceConfig {
    fn default() -> Self {
        DominanceConfig {
            n: 256,
            dim: 64,
            group_size: 16,
            saturated_fraction: 0.35,
            noise: 0.1,
            bits: BitsMode::W2,
            algorithm: Algorithm::Base,
            train: TrainConfig {
                stepsize: 0.2,
                batch_size: 8,
                steps: 1500,
                refresh: Refresh::Interval(25),
                vr_mode: VrMode::Svrg,
                ..Default::default()
            },
            jac_mode: JacMode::Probe,
            mc_samples: 20_000,
            fd_eps_frac: 0.1,
            trace_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceSeed {
    pub seed: u64,
    /// Share of optimal weights beyond their group's clip level.
    pub saturated_share: f64,
    pub bias_jacquant: f64,
    pub bias_ste: f64,
    pub fd_var_jacquant: f64,
    pub fd_var_ste: f64,
    pub loss_jacquant: f64,
    pub loss_ste: f64,
    pub mean_gain: f64,
}

/// Trains the learned-gain rule and STE from the same start and seed. Bias
/// and finite-difference mismatch are evaluated on the learned-gain run.
pub fn dominance_harness(cfg: &DominanceConfig, seed: u64) -> Result<DominanceSeed> {
    let task = saturating_task(cfg.n, cfg.dim, cfg.group_size, cfg.saturated_fraction, cfg.noise, seed)?;
    let spec = QuantSpec::new(cfg.bits, 1.0, cfg.group_size)?;
    let quantizer = Quantizer::build(spec, ScaleMode::MaxAbs, &task.w_init)?;
    let obj = &task.objective;
    let beyond = task
        .w_star
        .iter()
        .enumerate()
        .filter(|(i, w)| w.abs() > quantizer.spec.clip_codes as f64 * quantizer.step_of(*i))
        .count();

    let learned = TrainConfig { jac_mode: cfg.jac_mode, seed, ..cfg.train.clone() };
    let mut trace = Vec::new();
    let every = cfg.trace_every.max(1);
    let jq =
        trainer::run(cfg.algorithm, obj, Start::weights(task.w_init.clone()), &quantizer, &learned, &mut |view| {
            if view.step % every == 0 {
                trace.push(TracePoint {
                    w: view.w.to_vec(),
                    gains: view.gains.gains.clone(),
                    v_bar: view.v_bar.to_vec(),
                });
            }
        })?;
    let ste_cfg = TrainConfig { jac_mode: JacMode::Ste, ..learned.clone() };
    let ste = trainer::run(cfg.algorithm, obj, Start::weights(task.w_init.clone()), &quantizer, &ste_cfg, &mut |_| {})?;

    let (_, v_bar) = obj.full_grad(&quantizer.quantize(&jq.weights)?)?;
    let mc = MonteCarlo::new(cfg.mc_samples, mix(seed, 0xb1a5));
    let report = bias_report(&quantizer, &jq.weights, &jq.gains, &v_bar, &mc)?;
    let coords: Vec<usize> = (0..cfg.dim).collect();
    let (fd_var_jacquant, fd_var_ste) = fd_mismatch_variance(&quantizer, &trace, cfg.fd_eps_frac * spec.step, &coords)?;
    Ok(DominanceSeed {
        seed,
        saturated_share: beyond as f64 / cfg.dim as f64,
        bias_jacquant: report.bias_jacquant,
        bias_ste: report.bias_ste,
        fd_var_jacquant,
        fd_var_ste,
        loss_jacquant: jq.final_loss(obj, &quantizer)?,
        loss_ste: ste.final_loss(obj, &quantizer)?,
        mean_gain: jq.gains.gains.iter().sum::<f64>() / jq.gains.num_groups() as f64,
    })
}

pub(crate) fn dominance_output(cfg: &DominanceConfig, seeds: &[u64]) -> Result<HarnessOutput> {
    let started = Instant::now();
    let runs: Vec<DominanceSeed> =
        crate::par_map(seeds, |&s| dominance_harness(cfg, s)).into_iter().collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&[
        "seed",
        "saturated_share",
        "bias_jacquant",
        "bias_ste",
        "fd_var_jacquant",
        "fd_var_ste",
        "loss_jacquant",
        "loss_ste",
        "mean_gain",
    ]);
    for r in &runs {
        table.push(vec![
            r.seed as f64,
            r.saturated_share,
            r.bias_jacquant,
            r.bias_ste,
            r.fd_var_jacquant,
            r.fd_var_ste,
            r.loss_jacquant,
            r.loss_ste,
            r.mean_gain,
        ]);
    }
    let n = runs.len();
    let need = n.saturating_sub(1).max(1);
    let count = |f: &dyn Fn(&DominanceSeed) -> bool| runs.iter().filter(|r| f(r)).count();
    let min_share = runs.iter().map(|r| r.saturated_share).fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::at_least("saturated_share_at_optimum", min_share, 0.3),
        Check::seeds("bias_jacquant_below_ste", count(&|r| r.bias_jacquant < r.bias_ste), n, need),
        Check::seeds("fd_mismatch_var_jacquant_below_ste", count(&|r| r.fd_var_jacquant < r.fd_var_ste), n, need),
        Check::seeds("final_loss_jacquant_at_most_ste", count(&|r| r.loss_jacquant <= r.loss_ste), n, need),
    ];
    Ok(HarnessOutput::new("dominance", checks, table, started))
}
