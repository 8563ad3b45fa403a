//! Training loops: the variance-reduced loop with amortised Jacobian
//! refreshes, the plain (non-VR) loop, and parameter sweeps over them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::jacobian::{Estimator, ProbeConfig, SurrogateJacobian, DEFAULT_EMA_RATE};
use crate::objectives::Objective;
use crate::quant::{DitherDraw, QuantSpec, Quantizer, ScaleMode};
use crate::rng::{mix, stream_rng, Stream};
use crate::vrgrad::{sample_batch, SurrogateProblem, VrMode, VrState};
use crate::{norm, Error, Result};

/// Loss blow-up factor (relative to the initial loss) that aborts a run.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacMode {
    /// Gains frozen at 1.
    Ste,
    #[default]
    Probe,
    ProbeLs,
    Dither,
}

impl JacMode {
    fn estimator(self) -> Option<Estimator> {
        match self {
            JacMode::Ste => None,
            JacMode::Probe => Some(Estimator::Probe),
            JacMode::ProbeLs => Some(Estimator::ProbeLeastSquares),
            JacMode::Dither => Some(Estimator::Dither),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refresh {
    Probability(f64),
    /// Refresh after steps `k, 2k, ...` (steps are numbered from 1).
    Interval(usize),
}

impl Default for Refresh {
    fn default() -> Self {
        Refresh::Interval(100)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Vr,
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stepsize: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub refresh: Refresh,
    pub jac_mode: JacMode,
    pub vr_mode: VrMode,
    pub ema_rate: f64,
    pub probe: ProbeConfig,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Permits `vr_mode = plain` in the VR loop.
    pub allow_plain: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stepsize: 0.05,
            batch_size: 8,
            steps: 1000,
            refresh: Refresh::default(),
            jac_mode: JacMode::default(),
            vr_mode: VrMode::default(),
            ema_rate: DEFAULT_EMA_RATE,
            probe: ProbeConfig::default(),
            clip_lo: 0.0,
            clip_hi: 1.0,
            allow_plain: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stepsize.is_finite() && self.stepsize > 0.0) {
            return Err(Error::InvalidArgument(format!("stepsize must be positive, got {}", self.stepsize)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        match self.refresh {
            Refresh::Probability(p) if !(p > 0.0 && p <= 1.0) => {
                return Err(Error::InvalidArgument("refresh probability out of (0,1]".into()));
            }
            Refresh::Interval(0) => return Err(Error::InvalidArgument("refresh interval must be >= 1".into())),
            _ => {}
        }
        if !(self.ema_rate > 0.0 && self.ema_rate <= 1.0) {
            return Err(Error::InvalidArgument(format!("ema_rate must be in (0, 1], got {}", self.ema_rate)));
        }
        if !(self.clip_lo <= self.clip_hi && self.clip_lo.is_finite() && self.clip_hi.is_finite()) {
            return Err(Error::InvalidArgument("clip_lo must not exceed clip_hi".into()));
        }
        self.probe.validate()
    }
}

/// Observables for one training step.
///
/// `loss`, `grad_norm` and `frac_saturated` describe the iterate the step
/// started from; gain statistics and `refresh_flag` describe the state after
/// the step (including any refresh it triggered).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Full-dataset loss at `Q(W_t)`.
    pub loss: f64,
    /// Norm of the full-batch upstream gradient `v_bar` at `Q(W_t)`.
    pub grad_norm: f64,
    /// Norm of the estimate used for the update.
    pub surrogate_grad_norm: f64,
    pub mean_gain: f64,
    pub min_gain: f64,
    pub max_gain: f64,
    pub frac_saturated: f64,
    pub refresh_flag: bool,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str =
        "step,loss,grad_norm,surrogate_grad_norm,mean_gain,min_gain,max_gain,frac_saturated,refresh_flag";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            self.step,
            self.loss,
            self.grad_norm,
            self.surrogate_grad_norm,
            self.mean_gain,
            self.min_gain,
            self.max_gain,
            self.frac_saturated,
            u8::from(self.refresh_flag)
        )
    }
}

/// State handed to an observer before each update.
pub struct StepView<'a> {
    pub step: usize,
    pub w: &'a [f64],
    pub gains: &'a SurrogateJacobian,
    /// Full-batch upstream gradient at `Q(W_t)`.
    pub v_bar: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: Vec<f64>,
    pub gains: SurrogateJacobian,
    pub trace: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn final_loss(&self, objective: &Objective, quantizer: &Quantizer) -> Result<f64> {
        objective.full_loss(&quantizer.quantize(&self.weights)?)
    }

    pub fn refresh_count(&self) -> usize {
        self.trace.iter().filter(|r| r.refresh_flag).count()
    }
}

/// Starting point of a run; `gains = None` starts from the STE gains.
#[derive(Debug, Clone)]
pub struct Start {
    pub weights: Vec<f64>,
    pub gains: Option<SurrogateJacobian>,
}

impl Start {
    pub fn weights(w: Vec<f64>) -> Self {
        Start { weights: w, gains: None }
    }
}

pub fn train_vr(objective: &Objective, w0: &[f64], quantizer: &Quantizer, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(Algorithm::Vr, objective, Start::weights(w0.to_vec()), quantizer, cfg, &mut |_| {})
}

pub fn train_base(objective: &Objective, w0: &[f64], quantizer: &Quantizer, cfg: &TrainConfig) -> Result<TrainOutcome> {
    run(Algorithm::Base, objective, Start::weights(w0.to_vec()), quantizer, cfg, &mut |_| {})
}

pub fn run(
    algorithm: Algorithm,
    objective: &Objective,
    start: Start,
    quantizer: &Quantizer,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&StepView<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if algorithm == Algorithm::Vr && cfg.vr_mode == VrMode::Plain && !cfg.allow_plain {
        return Err(Error::InvalidArgument("vr_mode = plain requires allow_plain".into()));
    }
    let problem = SurrogateProblem::new(objective, quantizer)?;
    let groups = quantizer.layout.num_groups();
    let mut gains = match start.gains {
        Some(g) => g,
        None => SurrogateJacobian::from_gains(vec![1.0; groups], cfg.ema_rate, cfg.clip_lo, cfg.clip_hi.max(1.0))?,
    };
    gains.ema_rate = cfg.ema_rate;
    gains.clip_lo = cfg.clip_lo;
    gains.clip_hi = cfg.clip_hi;
    if gains.num_groups() != groups {
        return Err(Error::LengthMismatch { expected: groups, got: gains.num_groups() });
    }
    let mut w = start.weights;
    if w.len() != problem.dim() {
        return Err(Error::LengthMismatch { expected: problem.dim(), got: w.len() });
    }

    let all = problem.all_indices();
    let mut state = match algorithm {
        Algorithm::Vr => Some(VrState::init(cfg.vr_mode, &problem, &w, &gains, &all)?),
        Algorithm::Base => None,
    };
    let mut batch_rng = stream_rng(cfg.seed, Stream::Minibatch, 0);
    let mut refresh_rng = stream_rng(cfg.seed, Stream::Refresh, 0);
    let batch_size = cfg.batch_size.min(problem.n());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut initial_loss = None;

    for step in 1..=cfg.steps {
        let q = problem.forward(&w)?;
        let (loss, v_bar) = objective.full_grad(&q)?;
        let threshold = DIVERGENCE_FACTOR * *initial_loss.get_or_insert(loss);
        if !loss.is_finite() || (threshold > 0.0 && loss > threshold) {
            return Err(Error::Diverged { step, loss, threshold });
        }
        let frac_saturated = quantizer.saturated_fraction(&w);
        observer(&StepView { step, w: &w, gains: &gains, v_bar: &v_bar });

        let batch = sample_batch(&mut batch_rng, problem.n(), batch_size);
        let g = match state.as_mut() {
            Some(state) => {
                let g = state.grad_est(&problem, &w, &gains, &batch)?;
                state.ctrl_update(&problem, &w, &gains, &batch, &g)?;
                g
            }
            None => base_gradient(&problem, cfg, &w, &gains, &batch, step)?,
        };
        w.iter_mut().zip(&g).for_each(|(wi, gi)| *wi -= cfg.stepsize * gi);

        let refresh = match cfg.refresh {
            Refresh::Interval(k) => step % k == 0,
            Refresh::Probability(p) => refresh_rng.random::<f64>() <= p,
        };
        if refresh {
            if let Some(est) = cfg.jac_mode.estimator() {
                gains.update(quantizer, &w, &cfg.probe, mix(cfg.seed, step as u64), est)?;
            }
            if let Some(state) = state.as_mut() {
                state.refresh_anchor(&problem, &w, &gains, &all)?;
            }
        }

        let (min_gain, max_gain, mean_gain) = gain_stats(&gains.gains);
        trace.push(MetricsRecord {
            step,
            loss,
            grad_norm: norm(&v_bar),
            surrogate_grad_norm: norm(&g),
            mean_gain,
            min_gain,
            max_gain,
            frac_saturated,
            refresh_flag: refresh,
        });
    }
    Ok(TrainOutcome { weights: w, gains, trace })
}

/// Plain minibatch estimate `B * mean v_i(q)`; the dither mode evaluates the
/// upstream gradient at `q = Q(W + r) - r` with a fresh dither per step.
fn base_gradient(
    problem: &SurrogateProblem<'_>,
    cfg: &TrainConfig,
    w: &[f64],
    gains: &SurrogateJacobian,
    batch: &[usize],
    step: usize,
) -> Result<Vec<f64>> {
    let q = if cfg.jac_mode == JacMode::Dither {
        let mut rng = stream_rng(cfg.seed, Stream::Dither, step as u64);
        let r = DitherDraw::sample(problem.quantizer, &mut rng, step as u64);
        problem.quantizer.dither_quantize(w, &r)?
    } else {
        problem.forward(w)?
    };
    let d = problem.dim();
    let mut sum = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for &i in batch {
        problem.term_at(&q, gains, i, &mut scratch)?;
        sum.iter_mut().zip(&scratch).for_each(|(s, x)| *s += x);
    }
    let k = batch.len() as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Ok(sum)
}

fn gain_stats(gains: &[f64]) -> (f64, f64, f64) {
    if gains.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let max = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (min, max, gains.iter().sum::<f64>() / gains.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub group_sizes: Vec<usize>,
    pub intervals: Vec<usize>,
    pub jac_modes: Vec<JacMode>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(usize, usize, JacMode)> {
        let mut out = Vec::new();
        for &gs in &self.group_sizes {
            for &k in &self.intervals {
                for &mode in &self.jac_modes {
                    out.push((gs, k, mode));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub group_size: usize,
    pub interval: usize,
    pub jac_mode: JacMode,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

/// What a sweep cell trains: the objective, its initial weights, and how to
/// build the quantizer for a given group size.
pub struct SweepTask<'a> {
    pub objective: &'a Objective,
    pub w0: &'a [f64],
    pub spec: QuantSpec,
    pub scale: ScaleMode,
    pub algorithm: Algorithm,
}

/// Runs one training per grid cell with the base config's seed. Failed
/// cells are recorded and the sweep continues. `jobs` bounds parallelism.
pub fn run_sweep(task: &SweepTask<'_>, base: &TrainConfig, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepRecord>> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Err(Error::InvalidArgument("sweep grid is empty".into()));
    }
    let run_cell = |&(group_size, interval, jac_mode): &(usize, usize, JacMode)| {
        let mut cfg = base.clone();
        cfg.refresh = Refresh::Interval(interval);
        cfg.jac_mode = jac_mode;
        let result = (|| {
            let spec = QuantSpec { group_size, ..task.spec };
            let quantizer = Quantizer::build(spec, task.scale, task.w0)?;
            let out =
                run(task.algorithm, task.objective, Start::weights(task.w0.to_vec()), &quantizer, &cfg, &mut |_| {})?;
            out.final_loss(task.objective, &quantizer)
        })();
        SweepRecord {
            group_size,
            interval,
            jac_mode,
            seed: cfg.seed,
            final_loss: result.as_ref().ok().copied(),
            error: result.err().map(|e| e.to_string()),
        }
    };
    if jobs <= 1 || cfg!(not(feature = "parallel")) {
        return Ok(cells.iter().map(run_cell).collect());
    }
    parallel_cells(&cells, jobs, run_cell)
}

#[cfg(feature = "parallel")]
fn parallel_cells<C: Sync>(
    cells: &[C],
    jobs: usize,
    f: impl Fn(&C) -> SweepRecord + Sync + Send,
) -> Result<Vec<SweepRecord>> {
    use rayon::prelude::*;
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(pool.install(|| cells.par_iter().map(f).collect()))
}

#[cfg(not(feature = "parallel"))]
fn parallel_cells<C>(cells: &[C], _jobs: usize, f: impl Fn(&C) -> SweepRecord) -> Result<Vec<SweepRecord>> {
    Ok(cells.iter().map(f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{linear_regression, make_pl_instance};
    use crate::quant::BitsMode;

    fn identity_quantizer(d: usize, group: usize) -> Quantizer {
        Quantizer::uniform(QuantSpec::new(BitsMode::Identity, 1.0, group).unwrap(), d).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig { refresh: Refresh::Probability(1.5), ..Default::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("refresh probability out of (0,1]"), "{err}");
        cfg.refresh = Refresh::Interval(0);
        assert!(cfg.validate().is_err());
        cfg.refresh = Refresh::Interval(5);
        cfg.stepsize = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_ste_reduces_to_sgd() {
        let (obj, _) = linear_regression(32, 6, 0.2, 3).unwrap();
        let q = identity_quantizer(6, 3);
        let cfg = TrainConfig {
            stepsize: 0.05,
            batch_size: 4,
            steps: 200,
            jac_mode: JacMode::Ste,
            vr_mode: VrMode::Plain,
            allow_plain: true,
            seed: 9,
            ..Default::default()
        };
        let w0 = vec![0.1; 6];
        let out = train_vr(&obj, &w0, &q, &cfg).unwrap();
        // textbook SGD with the same batches
        let mut rng = stream_rng(cfg.seed, Stream::Minibatch, 0);
        let mut w = w0.clone();
        for _ in 0..cfg.steps {
            let batch = sample_batch(&mut rng, 32, 4);
            let (_, g) = obj.batch_grad(&w, &batch).unwrap();
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.stepsize * b);
        }
        for (a, b) in out.weights.iter().zip(&w) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn plain_requires_opt_in() {
        let (obj, _) = linear_regression(8, 2, 0.2, 3).unwrap();
        let q = identity_quantizer(2, 2);
        let cfg = TrainConfig { vr_mode: VrMode::Plain, ..Default::default() };
        assert!(train_vr(&obj, &[0.0, 0.0], &q, &cfg).is_err());
    }

    #[test]
    fn always_refresh_svrg_uses_full_batch_gradient() {
        let (obj, _) = linear_regression(16, 4, 0.3, 1).unwrap();
        let q = Quantizer::uniform(QuantSpec::new(BitsMode::Generic(4), 0.2, 2).unwrap(), 4).unwrap();
        let cfg = TrainConfig {
            stepsize: 0.1,
            batch_size: 2,
            steps: 20,
            refresh: Refresh::Probability(1.0),
            jac_mode: JacMode::Ste,
            vr_mode: VrMode::Svrg,
            seed: 2,
            ..Default::default()
        };
        let w0 = vec![0.3, -0.2, 0.1, 0.5];
        let out = train_vr(&obj, &w0, &q, &cfg).unwrap();
        let mut w = w0.clone();
        for _ in 0..cfg.steps {
            let (_, g) = obj.full_grad(&q.quantize(&w).unwrap()).unwrap();
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= cfg.stepsize * b);
        }
        for (a, b) in out.weights.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.refresh_count(), 20);
    }

    #[test]
    fn interval_refresh_accounting() {
        let (obj, _) = linear_regression(16, 4, 0.3, 1).unwrap();
        let q = identity_quantizer(4, 2);
        let cfg = TrainConfig { steps: 95, refresh: Refresh::Interval(10), stepsize: 0.01, ..Default::default() };
        let out = train_vr(&obj, &[0.0; 4], &q, &cfg).unwrap();
        assert_eq!(out.refresh_count(), 9);
        for r in &out.trace {
            assert_eq!(r.refresh_flag, r.step % 10 == 0);
        }
    }

    #[test]
    fn pl_full_batch_contracts() {
        let obj = make_pl_instance(6, 0.1, 1.0, 4).unwrap();
        let Objective::Quadratic(quad) = &obj else { unreachable!() };
        let opt = quad.optimum();
        let q = identity_quantizer(6, 6);
        let cfg = TrainConfig {
            stepsize: 0.5,
            batch_size: 1,
            steps: 60,
            refresh: Refresh::Interval(1000),
            jac_mode: JacMode::Ste,
            vr_mode: VrMode::Svrg,
            ..Default::default()
        };
        let w0: Vec<f64> = opt.iter().map(|x| x + 3.0).collect();
        let out = train_vr(&obj, &w0, &q, &cfg).unwrap();
        for pair in out.trace.windows(2) {
            if pair[0].loss > 1e-20 {
                assert!(pair[1].loss / pair[0].loss <= 1.0 - 0.05 + 1e-6);
            }
        }
    }

    #[test]
    fn divergence_guard_fires() {
        let obj = make_pl_instance(3, 1.0, 1.0, 0).unwrap();
        let q = identity_quantizer(3, 3);
        let cfg = TrainConfig { stepsize: 3.0, steps: 100, jac_mode: JacMode::Ste, ..Default::default() };
        let err = train_vr(&obj, &[5.0, 5.0, 5.0], &q, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn runs_are_deterministic() {
        let (obj, _) = linear_regression(24, 8, 0.3, 5).unwrap();
        let q = Quantizer::calibrated(QuantSpec::new(BitsMode::W2, 1.0, 4).unwrap(), &[0.5; 8]).unwrap();
        for mode in [JacMode::Probe, JacMode::ProbeLs, JacMode::Dither] {
            let cfg =
                TrainConfig { steps: 40, refresh: Refresh::Probability(0.3), jac_mode: mode, ..Default::default() };
            let a = train_vr(&obj, &[0.2; 8], &q, &cfg).unwrap();
            let b = train_vr(&obj, &[0.2; 8], &q, &cfg).unwrap();
            assert_eq!(a.trace, b.trace);
            let c = train_base(&obj, &[0.2; 8], &q, &cfg).unwrap();
            let d = train_base(&obj, &[0.2; 8], &q, &cfg).unwrap();
            assert_eq!(c.trace, d.trace);
        }
    }

    #[test]
    fn sweep_shapes() {
        let (obj, _) = linear_regression(16, 8, 0.3, 5).unwrap();
        let w0 = vec![0.5; 8];
        let task = SweepTask {
            objective: &obj,
            w0: &w0,
            spec: QuantSpec::new(BitsMode::W2, 1.0, 4).unwrap(),
            scale: ScaleMode::MaxAbs,
            algorithm: Algorithm::Vr,
        };
        let base = TrainConfig { steps: 30, ..Default::default() };
        let one = SweepGrid { group_sizes: vec![4], intervals: vec![10], jac_modes: vec![JacMode::Probe] };
        let rec = run_sweep(&task, &base, &one, 1).unwrap();
        let cfg = TrainConfig { refresh: Refresh::Interval(10), ..base.clone() };
        let quant = Quantizer::build(task.spec, task.scale, &w0).unwrap();
        let single = train_vr(&obj, &w0, &quant, &cfg).unwrap().final_loss(&obj, &quant).unwrap();
        assert_eq!(rec[0].final_loss, Some(single));

        let grid = SweepGrid { group_sizes: vec![2, 4], intervals: vec![5, 10], jac_modes: vec![JacMode::Probe] };
        let seq = run_sweep(&task, &base, &grid, 1).unwrap();
        let par = run_sweep(&task, &base, &grid, 3).unwrap();
        assert_eq!(seq.len(), 4);
        assert_eq!(seq, par);
        assert!(seq.iter().all(|r| r.seed == base.seed && r.error.is_none()));
        let empty = SweepGrid { group_sizes: vec![], intervals: vec![1], jac_modes: vec![JacMode::Ste] };
        assert!(run_sweep(&task, &base, &empty, 1).is_err());
    }
}
