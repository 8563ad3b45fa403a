//! Linear contraction on PŁ quadratics, composition across drifting
//! windows, and the prefix-minimum gradient trend on a non-convex model.

use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{group_means, mean, Check, HarnessOutput, MonteCarlo, Table};
use crate::jacobian::SurrogateJacobian;
use crate::objectives::{make_pl_instance, mlp_regression, Objective, Quadratic};
use crate::quant::{BitsMode, DitherDraw, QuantSpec, Quantizer, ScaleMode};
use crate::rng::{mix, stream_rng, Stream};
use crate::trainer::{self, Algorithm, JacMode, Refresh, Start, TrainConfig};
use crate::vrgrad::VrMode;
use crate::{norm, Error, Result};

/// A PŁ quadratic with `n` per-sample centers spread around the optimum of
/// [`make_pl_instance`]; every sample shares the Hessian.
pub fn pl_with_samples(d: usize, mu: f64, l_smooth: f64, n: usize, spread: f64, seed: u64) -> Result<Objective> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let Objective::Quadratic(base) = make_pl_instance(d, mu, l_smooth, seed)? else {
        unreachable!("make_pl_instance returns a quadratic")
    };
    let mut rng = stream_rng(seed, Stream::Data, 7);
    let center = &base.centers[0];
    let centers =
        (0..n).map(|_| center.iter().map(|c| c + spread * rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    Ok(Objective::Quadratic(Quadratic::new(base.hessian().to_vec(), centers)?))
}

fn random_unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&v);
    v.into_iter().map(|x| x / n).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlConfig {
    pub dim: usize,
    pub mu: f64,
    pub l_smooth: f64,
    pub stepsize: f64,
    pub steps: usize,
    /// Size of the random per-group perturbation of the oracle gains.
    pub epsilon: f64,
    pub group_size: usize,
    /// Grid step of the (fine) quantizer.
    pub step: f64,
    /// Distance of the start from the optimum.
    pub radius: f64,
    /// Ratios are checked while `gap >= region_factor * floor`.
    pub region_factor: f64,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for PlConfig {
    fn default() -> Self {
        PlConfig {
            dim: 16,
            mu: 0.1,
            l_smooth: 1.0,
            stepsize: 0.5,
            steps: 3000,
            epsilon: 0.0,
            group_size: 4,
            step: 0.01,
            radius: 2.0,
            region_factor: 100.0,
            mc_samples: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlResult {
    pub gaps: Vec<f64>,
    /// Mean gap over the second half of the run.
    pub floor: f64,
    pub max_ratio: f64,
    pub ratios_checked: usize,
    /// Whether every iterate stayed inside the unclipped region.
    pub interior: bool,
}

/// Full-batch run on a PŁ quadratic with the dithered forward
/// `q = Q(W + r) - r` and gains `b_g = J_bar_g (1 + epsilon s_{g,t})`,
/// `s = ±1`. The gap is that of the dither-smoothed objective.
pub fn pl_contraction(cfg: &PlConfig) -> Result<PlResult> {
    if cfg.steps < 2 {
        return Err(Error::InvalidArgument("steps must be >= 2".into()));
    }
    let obj = make_pl_instance(cfg.dim, cfg.mu, cfg.l_smooth, cfg.seed)?;
    let Objective::Quadratic(quad) = &obj else { unreachable!("make_pl_instance returns a quadratic") };
    let w_star = quad.optimum();
    let f_star = obj.full_loss(&w_star)?;
    let quantizer = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(12), cfg.step, cfg.group_size)?, cfg.dim)?;
    let u = random_unit(&mut stream_rng(cfg.seed, Stream::Init, 0), cfg.dim);
    let mut w: Vec<f64> = w_star.iter().zip(&u).map(|(a, b)| a + cfg.radius * b).collect();

    let mc = MonteCarlo { samples: cfg.mc_samples, eps: Some(cfg.step / 10.0), seed: mix(cfg.seed, 0x91) };
    let oracle = group_means(&quantizer, &mc.sensitivity(&quantizer, &w)?).mean;
    let groups = oracle.len();
    let mut gains = SurrogateJacobian::from_gains(oracle.clone(), 1.0, 0.0, 1.0 + cfg.epsilon.abs() + 0.1)?;
    let mut signs = stream_rng(cfg.seed, Stream::Perturb, 0);
    let mut gaps = Vec::with_capacity(cfg.steps + 1);
    let mut interior = true;
    let limit = (quantizer.spec.clip_codes as f64 - 1.0) * cfg.step;
    for t in 0..cfg.steps {
        gaps.push(obj.full_loss(&w)? - f_star);
        interior &= w.iter().all(|x| x.abs() <= limit);
        let r = DitherDraw::sample(&quantizer, &mut stream_rng(cfg.seed, Stream::Dither, t as u64), t as u64);
        let q = quantizer.dither_quantize(&w, &r)?;
        let (_, v_bar) = obj.full_grad(&q)?;
        for g in 0..groups {
            let s = if signs.random::<bool>() { 1.0 } else { -1.0 };
            gains.gains[g] = oracle[g] * (1.0 + cfg.epsilon * s);
        }
        let g = gains.apply(&v_bar, &quantizer.layout)?;
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= cfg.stepsize * gi);
    }
    gaps.push(obj.full_loss(&w)? - f_star);
    let floor = mean(&gaps[cfg.steps / 2..]);
    let mut max_ratio: f64 = 0.0;
    let mut checked = 0;
    for pair in gaps.windows(2) {
        if pair[0] >= cfg.region_factor * floor && pair[0] > 0.0 {
            max_ratio = max_ratio.max(pair[1] / pair[0]);
            checked += 1;
        } else {
            break;
        }
    }
    Ok(PlResult { gaps, floor, max_ratio, ratios_checked: checked, interior })
}

pub(crate) fn pl_output(seeds: &[u64]) -> Result<HarnessOutput> {
    let started = Instant::now();
    let base = PlConfig::default();
    let bound = 1.0 - base.stepsize * base.mu + 1e-3;
    let mut table = Table::new(&["seed", "epsilon", "floor", "max_ratio", "ratios_checked"]);
    let mut worst_ratio: f64 = 0.0;
    let mut min_checked = usize::MAX;
    let mut interior = true;
    let mut wins = 0;
    for &seed in seeds {
        let exact = pl_contraction(&PlConfig { seed, ..base.clone() })?;
        let noisy = pl_contraction(&PlConfig { seed, epsilon: 0.2, ..base.clone() })?;
        for (eps, r) in [(0.0, &exact), (0.2, &noisy)] {
            table.push(vec![seed as f64, eps, r.floor, r.max_ratio, r.ratios_checked as f64]);
        }
        worst_ratio = worst_ratio.max(exact.max_ratio);
        min_checked = min_checked.min(exact.ratios_checked);
        interior &= exact.interior && noisy.interior;
        wins += usize::from(exact.floor < noisy.floor);
    }
    let n = seeds.len();
    let checks = vec![
        Check::at_most("max_gap_ratio_above_floor", worst_ratio, bound),
        Check::flag("contraction_region_nonempty", min_checked >= 10, format!("{min_checked} ratios checked")),
        Check::flag("iterates_unclipped", interior, "dithered forward stays in the unclipped region"),
        Check::seeds("floor_decreases_with_epsilon", wins, n, n.saturating_sub(1).max(1)),
    ];
    Ok(HarnessOutput::new("pl_contraction", checks, table, started))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowConfig {
    pub dim: usize,
    pub n_samples: usize,
    pub spread: f64,
    pub mu: f64,
    pub l_smooth: f64,
    pub steps_per_window: usize,
    /// Optimum shift applied before window `k` (entry 0 is unused).
    pub drifts: Vec<f64>,
    pub step: f64,
    pub group_size: usize,
    pub train: TrainConfig,
    pub seed: u64,
}

impl WindowConfig {
    pub fn geometric(delta0: f64, windows: usize) -> Vec<f64> {
        (0..windows).map(|k| delta0 * 0.5f64.powi(k as i32)).collect()
    }

    pub fn constant(delta0: f64, windows: usize) -> Vec<f64> {
        vec![delta0; windows]
    }
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            dim: 8,
            n_samples: 32,
            spread: 1.0,
            mu: 0.1,
            l_smooth: 1.0,
            steps_per_window: 20,
            drifts: WindowConfig::constant(0.1, 10),
            step: 1e-3,
            group_size: 4,
            train: TrainConfig {
                stepsize: 0.5,
                batch_size: 4,
                steps: 20,
                refresh: Refresh::Interval(5),
                jac_mode: JacMode::Probe,
                vr_mode: VrMode::Svrg,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowResult {
    /// Gap at `Q(W)` after every step, per window (entry 0 is the start).
    pub gaps: Vec<Vec<f64>>,
    pub terminal_gaps: Vec<f64>,
    /// Per-window geometric-mean contraction factor of the gap.
    pub contraction: Vec<f64>,
}

impl WindowResult {
    pub fn terminal_gap(&self) -> f64 {
        *self.terminal_gaps.last().unwrap_or(&f64::NAN)
    }
}

/// Runs the VR loop window by window with warm-started weights and gains,
/// shifting the quadratic's optimum by `drifts[k] * u_k` before window `k`.
pub fn window_composition_harness(cfg: &WindowConfig) -> Result<WindowResult> {
    if cfg.drifts.is_empty() || cfg.steps_per_window == 0 {
        return Err(Error::InvalidArgument("need at least one window of at least one step".into()));
    }
    let Objective::Quadratic(mut quad) =
        pl_with_samples(cfg.dim, cfg.mu, cfg.l_smooth, cfg.n_samples, cfg.spread, cfg.seed)?
    else {
        unreachable!("pl_with_samples returns a quadratic")
    };
    let quantizer = Quantizer::build(
        QuantSpec::new(BitsMode::Generic(16), cfg.step, cfg.group_size)?,
        ScaleMode::Fixed,
        &vec![0.0; cfg.dim],
    )?;
    let mut shifts = stream_rng(cfg.seed, Stream::Perturb, 1);
    let mut start = Start::weights(vec![0.0; cfg.dim]);
    let mut result = WindowResult { gaps: vec![], terminal_gaps: vec![], contraction: vec![] };
    for (k, &delta) in cfg.drifts.iter().enumerate() {
        if k > 0 && delta != 0.0 {
            let u = random_unit(&mut shifts, cfg.dim);
            let shift: Vec<f64> = u.iter().map(|x| delta * x).collect();
            quad.shift(&shift);
        }
        let obj = Objective::Quadratic(quad.clone());
        let f_star = obj.full_loss(&quad.optimum())?;
        let train = TrainConfig { steps: cfg.steps_per_window, seed: mix(cfg.seed, k as u64), ..cfg.train.clone() };
        let mut gaps = Vec::with_capacity(cfg.steps_per_window + 1);
        let out = trainer::run(Algorithm::Vr, &obj, start.clone(), &quantizer, &train, &mut |_| {})?;
        gaps.extend(out.trace.iter().map(|r| r.loss - f_star));
        gaps.push(out.final_loss(&obj, &quantizer)? - f_star);
        let first = gaps[0].max(f64::MIN_POSITIVE);
        let last = gaps[gaps.len() - 1].max(f64::MIN_POSITIVE);
        result.contraction.push((last / first).powf(1.0 / cfg.steps_per_window as f64));
        result.terminal_gaps.push(gaps[gaps.len() - 1]);
        result.gaps.push(gaps);
        start = Start { weights: out.weights, gains: Some(out.gains) };
    }
    Ok(result)
}

pub(crate) fn window_output(seeds: &[u64]) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mut table = Table::new(&["seed", "schedule", "window", "terminal_gap"]);
    let mut wins = 0;
    for &seed in seeds {
        let mut terminal = [0.0; 2];
        for (code, drifts) in
            [WindowConfig::geometric(0.1, 10), WindowConfig::constant(0.1, 10)].into_iter().enumerate()
        {
            let res = window_composition_harness(&WindowConfig { drifts, seed, ..Default::default() })?;
            for (k, g) in res.terminal_gaps.iter().enumerate() {
                table.push(vec![seed as f64, code as f64, k as f64, *g]);
            }
            terminal[code] = res.terminal_gap();
        }
        wins += usize::from(terminal[0] < terminal[1]);
    }
    let n = seeds.len();
    let checks = vec![Check::seeds("geometric_drift_terminal_gap_below_constant", wins, n, n.saturating_sub(1).max(1))];
    Ok(HarnessOutput::new("window_composition", checks, table, started))
}

/// Prefix minima of the full-batch upstream gradient norm at `T, 4T, 16T`
/// on a small tanh network trained with the VR loop.
pub fn nonconvex_trend(t0: usize, seed: u64) -> Result<Vec<f64>> {
    let (obj, _) = mlp_regression(64, 3, 6, seed)?;
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let w0: Vec<f64> = (0..obj.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let quantizer = Quantizer::build(QuantSpec::new(BitsMode::Generic(6), 1.0, 8)?, ScaleMode::MaxAbs, &w0)?;
    let cfg = TrainConfig {
        stepsize: 0.05,
        batch_size: 8,
        steps: 16 * t0,
        refresh: Refresh::Interval(10),
        jac_mode: JacMode::Probe,
        vr_mode: VrMode::Svrg,
        seed,
        ..Default::default()
    };
    let out = trainer::run(Algorithm::Vr, &obj, Start::weights(w0), &quantizer, &cfg, &mut |_| {})?;
    Ok([t0, 4 * t0, 16 * t0]
        .iter()
        .map(|&t| out.trace[..t].iter().map(|r| r.grad_norm).fold(f64::INFINITY, f64::min))
        .collect())
}

pub(crate) fn nonconvex_output(seed: u64) -> Result<HarnessOutput> {
    let started = Instant::now();
    let mins = nonconvex_trend(50, seed)?;
    let mut table = Table::new(&["horizon", "min_grad_norm"]);
    for (k, m) in mins.iter().enumerate() {
        table.push(vec![(50 * 4usize.pow(k as u32)) as f64, *m]);
    }
    let checks = vec![
        Check::below("min_grad_norm_4t_over_t", mins[1] / mins[0], 1.0),
        Check::below("min_grad_norm_16t_over_4t", mins[2] / mins[1], 1.0),
    ];
    Ok(HarnessOutput::new("nonconvex_trend", checks, table, started))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampled_pl_instance_keeps_hessian() {
        let obj = pl_with_samples(4, 0.1, 1.0, 5, 0.5, 2).unwrap();
        let Objective::Quadratic(q) = &obj else { panic!() };
        assert_eq!(q.centers.len(), 5);
        let Objective::Quadratic(base) = make_pl_instance(4, 0.1, 1.0, 2).unwrap() else { panic!() };
        assert_eq!(q.hessian(), base.hessian());
    }

    #[test]
    fn zero_drift_windows_match_one_long_run() {
        let train = TrainConfig {
            stepsize: 0.5,
            batch_size: 16,
            steps: 10,
            refresh: Refresh::Interval(3),
            jac_mode: JacMode::Ste,
            vr_mode: VrMode::Svrg,
            ..Default::default()
        };
        let cfg = WindowConfig {
            n_samples: 16,
            drifts: vec![0.0; 4],
            steps_per_window: 10,
            train: train.clone(),
            ..Default::default()
        };
        let res = window_composition_harness(&cfg).unwrap();
        let obj = pl_with_samples(cfg.dim, cfg.mu, cfg.l_smooth, 16, cfg.spread, cfg.seed).unwrap();
        let quantizer = Quantizer::build(
            QuantSpec::new(BitsMode::Generic(16), cfg.step, cfg.group_size).unwrap(),
            ScaleMode::Fixed,
            &[0.0; 8],
        )
        .unwrap();
        let long = TrainConfig { steps: 40, refresh: Refresh::Interval(1_000_000), ..train };
        let out =
            trainer::run(Algorithm::Vr, &obj, Start::weights(vec![0.0; 8]), &quantizer, &long, &mut |_| {}).unwrap();
        let f_star = obj.full_loss(&pl_optimum(&obj)).unwrap();
        let stitched: Vec<f64> = res.gaps.iter().flat_map(|g| g[..10].to_vec()).collect();
        for (a, r) in stitched.iter().zip(&out.trace) {
            assert!((a - (r.loss - f_star)).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {}", r.loss - f_star);
        }
    }

    fn pl_optimum(obj: &Objective) -> Vec<f64> {
        match obj {
            Objective::Quadratic(q) => q.optimum(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn pl_exact_oracle_contracts() {
        let res = pl_contraction(&PlConfig { steps: 400, ..Default::default() }).unwrap();
        assert!(res.interior);
        assert!(res.ratios_checked > 10);
        assert!(res.max_ratio <= 1.0 - 0.05 + 1e-3, "{}", res.max_ratio);
    }
}
