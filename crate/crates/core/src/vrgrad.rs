//! Variance-reduced estimators of the surrogate gradient.
//!
//! Per-sample terms are `F_i(W; B) = B * v_i(Q(W))`. Every estimator has the
//! control-variate form
//!
//! ```text
//! g = mean_{i in S} (F_i(W) - h_i) + g_ref
//! ```
//!
//! with `h_i = 0, g_ref = 0` (plain), `h_i = F_i(W~; B~)` (SVRG-like),
//! `h_i = Y_i, g_ref = mean(Y)` (SAGA-like) or the recursive SARAH-like
//! difference against the previous iterate.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::jacobian::SurrogateJacobian;
use crate::objectives::Objective;
use crate::quant::Quantizer;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VrMode {
    Plain,
    #[default]
    Svrg,
    Saga,
    Sarah,
}

/// Objective seen through a quantizer, with gains applied per quantization group.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateProblem<'a> {
    pub objective: &'a Objective,
    pub quantizer: &'a Quantizer,
}

impl<'a> SurrogateProblem<'a> {
    pub fn new(objective: &'a Objective, quantizer: &'a Quantizer) -> Result<Self> {
        if objective.dim() != quantizer.len() {
            return Err(Error::LengthMismatch { expected: objective.dim(), got: quantizer.len() });
        }
        Ok(SurrogateProblem { objective, quantizer })
    }

    pub fn n(&self) -> usize {
        self.objective.n_samples()
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn forward(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.quantizer.quantize(w)
    }

    /// `F_i` at the already quantized point `q`, written into `out`.
    pub fn term_at(&self, q: &[f64], gains: &SurrogateJacobian, i: usize, out: &mut [f64]) -> Result<f64> {
        if i >= self.n() {
            return Err(Error::IndexOutOfRange { index: i, n: self.n() });
        }
        let loss = self.objective.sample_grad_into(q, i, out);
        for (g, range) in self.quantizer.layout.bounds().iter().enumerate() {
            let b = gains.gains[g];
            out[range.clone()].iter_mut().for_each(|x| *x *= b);
        }
        Ok(loss)
    }

    pub fn term(&self, w: &[f64], gains: &SurrogateJacobian, i: usize) -> Result<Vec<f64>> {
        let q = self.forward(w)?;
        let mut out = vec![0.0; self.dim()];
        self.term_at(&q, gains, i, &mut out)?;
        Ok(out)
    }

    /// Mean of `F_i(W; B)` over `set`, summed in the order given.
    pub fn mean_term(&self, w: &[f64], gains: &SurrogateJacobian, set: &[usize]) -> Result<Vec<f64>> {
        let q = self.forward(w)?;
        self.mean_term_at(&q, gains, set)
    }

    fn mean_term_at(&self, q: &[f64], gains: &SurrogateJacobian, set: &[usize]) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_gains(gains)?;
        let mut sum = vec![0.0; self.dim()];
        let mut scratch = vec![0.0; self.dim()];
        for &i in set {
            self.term_at(q, gains, i, &mut scratch)?;
            sum.iter_mut().zip(&scratch).for_each(|(s, x)| *s += x);
        }
        let k = set.len() as f64;
        sum.iter_mut().for_each(|s| *s /= k);
        Ok(sum)
    }

    /// Mean of `F_i(W; B) - F_i(W'; B')` over `set`.
    fn mean_difference(
        &self,
        q: &[f64],
        gains: &SurrogateJacobian,
        q_ref: &[f64],
        gains_ref: &SurrogateJacobian,
        set: &[usize],
    ) -> Result<Vec<f64>> {
        if set.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.check_gains(gains)?;
        self.check_gains(gains_ref)?;
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for &i in set {
            self.term_at(q, gains, i, &mut a)?;
            self.term_at(q_ref, gains_ref, i, &mut b)?;
            for j in 0..d {
                sum[j] += a[j] - b[j];
            }
        }
        let k = set.len() as f64;
        sum.iter_mut().for_each(|s| *s /= k);
        Ok(sum)
    }

    fn check_gains(&self, gains: &SurrogateJacobian) -> Result<()> {
        let groups = self.quantizer.layout.num_groups();
        if gains.num_groups() != groups {
            return Err(Error::LengthMismatch { expected: groups, got: gains.num_groups() });
        }
        Ok(())
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.n()).collect()
    }
}

/// Anchor/reference gradient: mean of `B~ v_i(Q(W~))` over `ref_set`.
pub fn ref_grad(
    problem: &SurrogateProblem<'_>,
    anchor_w: &[f64],
    anchor_gains: &SurrogateJacobian,
    ref_set: &[usize],
) -> Result<Vec<f64>> {
    problem.mean_term(anchor_w, anchor_gains, ref_set)
}

/// Per-index table `Y_i` with its running mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SagaTable {
    pub rows: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl SagaTable {
    /// Mean recomputed from the rows.
    pub fn recomputed_mean(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        let mut m = vec![0.0; self.rows.first().map_or(0, Vec::len)];
        for r in &self.rows {
            m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        }
        m.iter_mut().for_each(|x| *x /= n);
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SarahMemory {
    pub prev_w: Vec<f64>,
    pub prev_grad: Vec<f64>,
    /// Set by a refresh: the next estimate is the reference gradient.
    pub restart: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VrState {
    pub mode: VrMode,
    pub anchor_w: Vec<f64>,
    pub anchor_gains: SurrogateJacobian,
    pub anchor_grad: Vec<f64>,
    pub saga: Option<SagaTable>,
    pub sarah: Option<SarahMemory>,
}

impl VrState {
    /// Anchors at `(w, gains)` and computes the reference gradient over `ref_set`.
    pub fn init(
        mode: VrMode,
        problem: &SurrogateProblem<'_>,
        w: &[f64],
        gains: &SurrogateJacobian,
        ref_set: &[usize],
    ) -> Result<Self> {
        let mut state = VrState {
            mode,
            anchor_w: w.to_vec(),
            anchor_gains: gains.clone(),
            anchor_grad: Vec::new(),
            saga: None,
            sarah: None,
        };
        state.refresh_anchor(problem, w, gains, ref_set)?;
        Ok(state)
    }

    /// Synchronises the anchor to `(w, gains)` and recomputes `g~`. For SAGA
    /// the table is rebuilt at the new point so that it uses the current gains.
    pub fn refresh_anchor(
        &mut self,
        problem: &SurrogateProblem<'_>,
        w: &[f64],
        gains: &SurrogateJacobian,
        ref_set: &[usize],
    ) -> Result<()> {
        self.anchor_w = w.to_vec();
        self.anchor_gains = gains.clone();
        match self.mode {
            VrMode::Saga => {
                let q = problem.forward(w)?;
                let mut rows = Vec::with_capacity(problem.n());
                for i in 0..problem.n() {
                    let mut row = vec![0.0; problem.dim()];
                    problem.term_at(&q, gains, i, &mut row)?;
                    rows.push(row);
                }
                let mut table = SagaTable { rows, mean: Vec::new() };
                table.mean = table.recomputed_mean();
                self.anchor_grad = table.mean.clone();
                self.saga = Some(table);
            }
            _ => {
                self.anchor_grad = ref_grad(problem, w, gains, ref_set)?;
            }
        }
        if self.anchor_grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite reference gradient".into()));
        }
        if self.mode == VrMode::Sarah {
            self.sarah = Some(SarahMemory { prev_w: w.to_vec(), prev_grad: self.anchor_grad.clone(), restart: true });
        }
        Ok(())
    }

    pub fn grad_est(
        &self,
        problem: &SurrogateProblem<'_>,
        w: &[f64],
        gains: &SurrogateJacobian,
        batch: &[usize],
    ) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        match self.mode {
            VrMode::Plain => problem.mean_term(w, gains, batch),
            VrMode::Svrg => {
                let q = problem.forward(w)?;
                let q_ref = problem.forward(&self.anchor_w)?;
                let diff = problem.mean_difference(&q, gains, &q_ref, &self.anchor_gains, batch)?;
                Ok(add(&diff, &self.anchor_grad))
            }
            VrMode::Saga => {
                let table = self.saga.as_ref().ok_or(Error::MissingState("SAGA table"))?;
                let q = problem.forward(w)?;
                let d = problem.dim();
                let mut sum = vec![0.0; d];
                let mut f = vec![0.0; d];
                for &i in batch {
                    problem.term_at(&q, gains, i, &mut f)?;
                    let y = &table.rows[i];
                    for j in 0..d {
                        sum[j] += f[j] - y[j];
                    }
                }
                let k = batch.len() as f64;
                sum.iter_mut().for_each(|s| *s /= k);
                Ok(add(&sum, &table.mean))
            }
            VrMode::Sarah => {
                let mem = self.sarah.as_ref().ok_or(Error::MissingState("SARAH memory"))?;
                if mem.restart {
                    return Ok(self.anchor_grad.clone());
                }
                let q = problem.forward(w)?;
                let q_prev = problem.forward(&mem.prev_w)?;
                let diff = problem.mean_difference(&q, gains, &q_prev, gains, batch)?;
                Ok(add(&diff, &mem.prev_grad))
            }
        }
    }

    /// Updates the VR memory after an estimate `g` was taken at `w` on `batch`.
    pub fn ctrl_update(
        &mut self,
        problem: &SurrogateProblem<'_>,
        w: &[f64],
        gains: &SurrogateJacobian,
        batch: &[usize],
        g: &[f64],
    ) -> Result<()> {
        match self.mode {
            VrMode::Plain | VrMode::Svrg => Ok(()),
            VrMode::Saga => {
                let table = self.saga.as_mut().ok_or(Error::MissingState("SAGA table"))?;
                let q = problem.forward(w)?;
                let n = table.rows.len() as f64;
                let mut fresh = vec![0.0; problem.dim()];
                for &i in batch {
                    problem.term_at(&q, gains, i, &mut fresh)?;
                    let row = &mut table.rows[i];
                    for (m, (r, f)) in table.mean.iter_mut().zip(row.iter().zip(&fresh)) {
                        *m += (f - r) / n;
                    }
                    row.copy_from_slice(&fresh);
                }
                Ok(())
            }
            VrMode::Sarah => {
                let mem = self.sarah.as_mut().ok_or(Error::MissingState("SARAH memory"))?;
                mem.prev_w = w.to_vec();
                mem.prev_grad = g.to_vec();
                mem.restart = false;
                Ok(())
            }
        }
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// `k` distinct indices from `0..n`, sorted ascending.
pub fn sample_batch<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut batch = index::sample(rng, n, k.min(n)).into_vec();
    batch.sort_unstable();
    batch
}

/// Where the estimator is evaluated relative to its anchor.
#[derive(Debug, Clone)]
pub struct VarianceSetup<'s> {
    pub mode: VrMode,
    pub anchor_w: &'s [f64],
    pub anchor_gains: &'s SurrogateJacobian,
    pub w: &'s [f64],
    pub gains: &'s SurrogateJacobian,
    pub batch_size: usize,
}

/// Empirical `E|g - grad|^2` over `trials` independent minibatches, where
/// `grad` is the full-batch surrogate gradient at `(w, gains)`.
pub fn estimator_variance(
    problem: &SurrogateProblem<'_>,
    setup: &VarianceSetup<'_>,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    if trials < 2 {
        return Err(Error::InvalidArgument("trials must be >= 2".into()));
    }
    if setup.batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    let all = problem.all_indices();
    let state = VrState::init(setup.mode, problem, setup.anchor_w, setup.anchor_gains, &all)?;
    let full = problem.mean_term(setup.w, setup.gains, &all)?;
    let mut rng = stream_rng(seed, Stream::Minibatch, 0);
    let mut total = 0.0;
    for _ in 0..trials {
        let batch = sample_batch(&mut rng, problem.n(), setup.batch_size);
        let g = state.grad_est(problem, setup.w, setup.gains, &batch)?;
        total += g.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / trials as f64)
}
