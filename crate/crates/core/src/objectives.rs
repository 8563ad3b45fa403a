//! Small differentiable objectives with handwritten per-sample gradients
//! with respect to the (quantized) weights.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::{stream_rng, Stream};
use crate::{dot, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::Dataset("dataset must contain at least one sample".into()));
        }
        if inputs.len() != targets.len() {
            return Err(Error::Dataset(format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        let dim = inputs[0].len();
        if let Some(i) = inputs.iter().position(|x| x.len() != dim) {
            return Err(Error::Dataset(format!("sample {i} has {} features, expected {dim}", inputs[i].len())));
        }
        if inputs.iter().flatten().chain(&targets).any(|v| !v.is_finite()) {
            return Err(Error::Dataset("non-finite value in dataset".into()));
        }
        Ok(Dataset { inputs, targets })
    }

    pub fn n(&self) -> usize {
        self.inputs.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Reads `features..., target` rows. A first row that does not parse as
    /// numbers is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Dataset(e.to_string()))?;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Dataset(e.to_string()))?;
            let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
            let mut row = match parsed {
                Ok(row) => row,
                Err(_) if line == 0 => continue,
                Err(e) => return Err(Error::Dataset(format!("line {}: {e}", line + 1))),
            };
            if row.len() < 2 {
                return Err(Error::Dataset(format!("line {}: need at least one feature and a target", line + 1)));
            }
            targets.push(row.pop().unwrap());
            inputs.push(row);
        }
        Dataset::new(inputs, targets)
    }
}

/// `l_i(q) = 1/2 (q - c_i)^T A (q - c_i)` with symmetric PSD `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    dim: usize,
    hessian: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
}

impl Quadratic {
    pub fn new(hessian: Vec<f64>, centers: Vec<Vec<f64>>) -> Result<Self> {
        let dim = centers.first().map(Vec::len).ok_or_else(|| Error::Dataset("no centers".into()))?;
        if hessian.len() != dim * dim {
            return Err(Error::LengthMismatch { expected: dim * dim, got: hessian.len() });
        }
        if centers.iter().any(|c| c.len() != dim) {
            return Err(Error::Dataset("centers have inconsistent dimension".into()));
        }
        Ok(Quadratic { dim, hessian, centers })
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    fn hess_mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(&self.hessian[r * self.dim..(r + 1) * self.dim], x);
        }
    }

    /// Minimiser of the mean loss: the mean of the centers.
    pub fn optimum(&self) -> Vec<f64> {
        let n = self.centers.len() as f64;
        let mut m = vec![0.0; self.dim];
        for c in &self.centers {
            for (mi, ci) in m.iter_mut().zip(c) {
                *mi += ci;
            }
        }
        m.iter_mut().for_each(|x| *x /= n);
        m
    }

    /// Shifts every center by `delta`.
    pub fn shift(&mut self, delta: &[f64]) {
        for c in &mut self.centers {
            for (ci, d) in c.iter_mut().zip(delta) {
                *ci += d;
            }
        }
    }
}

/// One-hidden-layer tanh network with scalar output and squared loss.
///
/// Parameter layout: `W1` (hidden x inputs, row-major), `b1`, `w2`, `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub data: Dataset,
    pub hidden: usize,
}

impl Mlp {
    fn split<'a>(&self, q: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], f64) {
        let p = self.data.dim();
        let h = self.hidden;
        let (w1, rest) = q.split_at(h * p);
        let (b1, rest) = rest.split_at(h);
        let (w2, rest) = rest.split_at(h);
        (w1, b1, w2, rest[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Quadratic(Quadratic),
    /// `1/2 (q . x - y)^2`.
    LinearRegression(Dataset),
    /// Binary cross-entropy with logits `q . x`, targets in `{0, 1}`.
    LogisticRegression(Dataset),
    Mlp(Mlp),
}

impl Objective {
    pub fn dim(&self) -> usize {
        match self {
            Objective::Quadratic(quad) => quad.dim,
            Objective::LinearRegression(d) | Objective::LogisticRegression(d) => d.dim(),
            Objective::Mlp(m) => m.hidden * m.data.dim() + 2 * m.hidden + 1,
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            Objective::Quadratic(quad) => quad.centers.len(),
            Objective::LinearRegression(d) | Objective::LogisticRegression(d) => d.n(),
            Objective::Mlp(m) => m.data.n(),
        }
    }

    pub fn per_sample_grad(&self, q: &[f64], i: usize) -> Result<(f64, Vec<f64>)> {
        self.check(q, i)?;
        let mut v = vec![0.0; self.dim()];
        let loss = self.sample_grad_into(q, i, &mut v);
        Ok((loss, v))
    }

    pub fn per_sample_loss(&self, q: &[f64], i: usize) -> Result<f64> {
        self.check(q, i)?;
        Ok(self.sample_loss(q, i))
    }

    /// Writes `v_i` into `out` and returns the loss. Unchecked.
    pub fn sample_grad_into(&self, q: &[f64], i: usize, out: &mut [f64]) -> f64 {
        match self {
            Objective::Quadratic(quad) => {
                let diff: Vec<f64> = q.iter().zip(&quad.centers[i]).map(|(a, b)| a - b).collect();
                quad.hess_mul(&diff, out);
                0.5 * dot(&diff, out)
            }
            Objective::LinearRegression(d) => {
                let x = &d.inputs[i];
                let r = dot(q, x) - d.targets[i];
                for (o, xj) in out.iter_mut().zip(x) {
                    *o = r * xj;
                }
                0.5 * r * r
            }
            Objective::LogisticRegression(d) => {
                let x = &d.inputs[i];
                let z = dot(q, x);
                let y = d.targets[i];
                let s = sigmoid(z);
                for (o, xj) in out.iter_mut().zip(x) {
                    *o = (s - y) * xj;
                }
                softplus(z) - y * z
            }
            Objective::Mlp(m) => {
                let x = &m.data.inputs[i];
                let p = x.len();
                let h = m.hidden;
                let (w1, b1, w2, b2) = m.split(q);
                let a: Vec<f64> = (0..h).map(|k| (dot(&w1[k * p..(k + 1) * p], x) + b1[k]).tanh()).collect();
                let f = dot(w2, &a) + b2;
                let df = f - m.data.targets[i];
                let (gw1, rest) = out.split_at_mut(h * p);
                let (gb1, rest) = rest.split_at_mut(h);
                let (gw2, gb2) = rest.split_at_mut(h);
                for k in 0..h {
                    let dz = df * w2[k] * (1.0 - a[k] * a[k]);
                    gb1[k] = dz;
                    gw2[k] = df * a[k];
                    for (g, xj) in gw1[k * p..(k + 1) * p].iter_mut().zip(x) {
                        *g = dz * xj;
                    }
                }
                gb2[0] = df;
                0.5 * df * df
            }
        }
    }

    fn sample_loss(&self, q: &[f64], i: usize) -> f64 {
        match self {
            Objective::Quadratic(quad) => {
                let diff: Vec<f64> = q.iter().zip(&quad.centers[i]).map(|(a, b)| a - b).collect();
                let mut ad = vec![0.0; quad.dim];
                quad.hess_mul(&diff, &mut ad);
                0.5 * dot(&diff, &ad)
            }
            Objective::LinearRegression(d) => {
                let r = dot(q, &d.inputs[i]) - d.targets[i];
                0.5 * r * r
            }
            Objective::LogisticRegression(d) => {
                let z = dot(q, &d.inputs[i]);
                softplus(z) - d.targets[i] * z
            }
            Objective::Mlp(m) => {
                let x = &m.data.inputs[i];
                let p = x.len();
                let (w1, b1, w2, b2) = m.split(q);
                let f: f64 =
                    (0..m.hidden).map(|k| w2[k] * (dot(&w1[k * p..(k + 1) * p], x) + b1[k]).tanh()).sum::<f64>() + b2;
                let r = f - m.data.targets[i];
                0.5 * r * r
            }
        }
    }

    /// Mean loss and mean gradient over `batch`, accumulated in the given order.
    pub fn batch_grad(&self, q: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for &i in batch {
            self.check(q, i)?;
        }
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let mut loss = 0.0;
        for &i in batch {
            loss += self.sample_grad_into(q, i, &mut scratch);
            for (s, v) in sum.iter_mut().zip(&scratch) {
                *s += v;
            }
        }
        let k = batch.len() as f64;
        sum.iter_mut().for_each(|s| *s /= k);
        Ok((loss / k, sum))
    }

    pub fn full_grad(&self, q: &[f64]) -> Result<(f64, Vec<f64>)> {
        let all: Vec<usize> = (0..self.n_samples()).collect();
        self.batch_grad(q, &all)
    }

    pub fn full_loss(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(Error::LengthMismatch { expected: self.dim(), got: q.len() });
        }
        let n = self.n_samples();
        Ok((0..n).map(|i| self.sample_loss(q, i)).sum::<f64>() / n as f64)
    }

    fn check(&self, q: &[f64], i: usize) -> Result<()> {
        if q.len() != self.dim() {
            return Err(Error::LengthMismatch { expected: self.dim(), got: q.len() });
        }
        if i >= self.n_samples() {
            return Err(Error::IndexOutOfRange { index: i, n: self.n_samples() });
        }
        Ok(())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

/// Random orthonormal basis (rows) by modified Gram-Schmidt.
fn random_orthonormal<R: Rng>(rng: &mut R, d: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = crate::norm(&v);
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

/// Quadratic with Hessian spectrum spanning exactly `[mu, l_smooth]`
/// (eigenvalues evenly spaced, rotated by a random orthogonal matrix).
/// The single center is drawn from `N(0, I)`.
pub fn make_pl_instance(d: usize, mu: f64, l_smooth: f64, seed: u64) -> Result<Objective> {
    if !(mu > 0.0 && mu <= l_smooth && l_smooth.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < mu <= L_s, got mu = {mu}, L_s = {l_smooth}")));
    }
    if d == 0 || (d == 1 && mu != l_smooth) {
        return Err(Error::InvalidArgument(format!("dimension {d} cannot carry spectrum [{mu}, {l_smooth}]")));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let eig: Vec<f64> =
        (0..d).map(|k| if d == 1 { mu } else { mu + (l_smooth - mu) * k as f64 / (d - 1) as f64 }).collect();
    let basis = random_orthonormal(&mut rng, d);
    let mut hessian = vec![0.0; d * d];
    for (k, u) in basis.iter().enumerate() {
        for r in 0..d {
            for c in 0..d {
                hessian[r * d + c] += eig[k] * u[r] * u[c];
            }
        }
    }
    // exact symmetry
    for r in 0..d {
        for c in (r + 1)..d {
            let s = 0.5 * (hessian[r * d + c] + hessian[c * d + r]);
            hessian[r * d + c] = s;
            hessian[c * d + r] = s;
        }
    }
    let center: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Objective::Quadratic(Quadratic::new(hessian, vec![center])?))
}

/// Linear regression with Gaussian features, `y = x . w* + noise`.
pub fn linear_regression(n: usize, d: usize, noise: f64, seed: u64) -> Result<(Objective, Vec<f64>)> {
    let mut rng = stream_rng(seed, Stream::Data, 1);
    let w_star: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let data = regression_data(&mut rng, n, &w_star, noise)?;
    Ok((Objective::LinearRegression(data), w_star))
}

fn regression_data<R: Rng>(rng: &mut R, n: usize, w_star: &[f64], noise: f64) -> Result<Dataset> {
    let inputs = gaussian_matrix(rng, n, w_star.len());
    let targets = inputs
        .iter()
        .map(|x| {
            let z: f64 = rng.sample(StandardNormal);
            dot(x, w_star) + noise * z
        })
        .collect();
    Dataset::new(inputs, targets)
}

pub fn logistic_regression(n: usize, d: usize, seed: u64) -> Result<(Objective, Vec<f64>)> {
    let mut rng = stream_rng(seed, Stream::Data, 2);
    let w_star: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let inputs = gaussian_matrix(&mut rng, n, d);
    let targets = inputs
        .iter()
        .map(|x| {
            let u: f64 = rng.random();
            if u < sigmoid(dot(x, &w_star)) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Ok((Objective::LogisticRegression(Dataset::new(inputs, targets)?), w_star))
}

/// Regression data fitted by a random teacher network of the same shape.
pub fn mlp_regression(n: usize, inputs: usize, hidden: usize, seed: u64) -> Result<(Objective, Vec<f64>)> {
    let mut rng = stream_rng(seed, Stream::Data, 3);
    let dim = hidden * inputs + 2 * hidden + 1;
    let teacher: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8).collect();
    let xs = gaussian_matrix(&mut rng, n, inputs);
    let probe = Objective::Mlp(Mlp { data: Dataset::new(xs.clone(), vec![0.0; n])?, hidden });
    // target = teacher output (loss at zero target is 1/2 f^2)
    let targets: Vec<f64> = (0..n)
        .map(|i| {
            let (_, v) = probe.per_sample_grad(&teacher, i).expect("valid teacher");
            v[dim - 1]
        })
        .collect();
    Ok((Objective::Mlp(Mlp { data: Dataset::new(xs, targets)?, hidden }), teacher))
}

/// Linear-regression task whose unquantized optimum lies partly beyond the
/// clip level of a max-abs-calibrated quantizer.
#[derive(Debug, Clone)]
pub struct SaturatingTask {
    pub objective: Objective,
    /// Initial weights; `max|w_init|` per group sets the clip level.
    pub w_init: Vec<f64>,
    pub w_star: Vec<f64>,
    /// Indices whose optimal weight exceeds the clip level.
    pub saturated: Vec<usize>,
}

/// Weights start uniform in `[-1, 1]` with at least one entry of magnitude 1
/// per group, so the calibrated clip level is 1 in weight units. A fraction
/// `saturated_fraction` of the optimal weights is placed at magnitude
/// `[1.5, 3]`; the rest lie inside `[-0.8, 0.8]`.
pub fn saturating_task(
    n: usize,
    d: usize,
    group_size: usize,
    saturated_fraction: f64,
    noise: f64,
    seed: u64,
) -> Result<SaturatingTask> {
    if !(0.0..=1.0).contains(&saturated_fraction) {
        return Err(Error::InvalidArgument(format!("saturated_fraction {saturated_fraction} not in [0, 1]")));
    }
    if group_size == 0 || d == 0 {
        return Err(Error::InvalidArgument("d and group_size must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Data, 4);
    let mut w_init: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    for start in (0..d).step_by(group_size) {
        let j = start + rng.random_range(0..group_size.min(d - start));
        w_init[j] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
    let k = (saturated_fraction * d as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut saturated: Vec<usize> = order[..k.min(d)].to_vec();
    saturated.sort_unstable();
    let mut w_star: Vec<f64> = (0..d).map(|_| rng.random_range(-0.8..0.8)).collect();
    for &j in &saturated {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        w_star[j] = sign * rng.random_range(1.5..3.0);
    }
    let data = regression_data(&mut rng, n, &w_star, noise)?;
    Ok(SaturatingTask { objective: Objective::LinearRegression(data), w_init, w_star, saturated })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_grad(obj: &Objective, q: &[f64], i: usize, eps: f64) -> Vec<f64> {
        (0..q.len())
            .map(|j| {
                let mut up = q.to_vec();
                let mut dn = q.to_vec();
                up[j] += eps;
                dn[j] -= eps;
                (obj.per_sample_loss(&up, i).unwrap() - obj.per_sample_loss(&dn, i).unwrap()) / (2.0 * eps)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        diff / crate::norm(b).max(1e-8)
    }

    #[test]
    fn quadratic_minimum_has_zero_grad() {
        let quad = Quadratic::new(vec![2.0, 0.5, 0.5, 1.0], vec![vec![1.0, -2.0]]).unwrap();
        let obj = Objective::Quadratic(quad);
        let (l, v) = obj.per_sample_grad(&[1.0, -2.0], 0).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_regression_single_sample() {
        let obj = Objective::LinearRegression(Dataset::new(vec![vec![1.0, 0.0]], vec![2.0]).unwrap());
        let (l, v) = obj.per_sample_grad(&[0.0, 0.0], 0).unwrap();
        assert_eq!(l, 2.0);
        assert_eq!(v, vec![-2.0, 0.0]);
        assert!(matches!(obj.per_sample_grad(&[0.0, 0.0], 1), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut objectives = Vec::new();
        for seed in 0..25u64 {
            objectives.push(linear_regression(4, 5, 0.3, seed).unwrap().0);
            objectives.push(logistic_regression(4, 5, seed).unwrap().0);
            objectives.push(mlp_regression(4, 3, 4, seed).unwrap().0);
            objectives.push(make_pl_instance(4, 0.2, 2.0, seed).unwrap());
        }
        for (k, obj) in objectives.iter().enumerate() {
            let mut rng = stream_rng(k as u64, Stream::Init, 0);
            let q: Vec<f64> = (0..obj.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let i = k % obj.n_samples();
            let (_, v) = obj.per_sample_grad(&q, i).unwrap();
            let fd = fd_grad(obj, &q, i, 1e-6);
            let e = rel_err(&v, &fd);
            assert!(e <= 1e-5, "objective {k}: relative error {e}");
        }
    }

    #[test]
    fn losses_nonnegative() {
        let (lin, _) = linear_regression(16, 3, 0.5, 1).unwrap();
        let (log, _) = logistic_regression(16, 3, 1).unwrap();
        for i in 0..16 {
            assert!(lin.per_sample_loss(&[3.0, -1.0, 0.2], i).unwrap() >= 0.0);
            assert!(log.per_sample_loss(&[30.0, -10.0, 0.2], i).unwrap() >= 0.0);
        }
    }

    #[test]
    fn batch_grad_cases() {
        let (obj, _) = linear_regression(10, 3, 0.1, 4).unwrap();
        let q = [0.3, -0.1, 0.7];
        assert_eq!(obj.batch_grad(&q, &[3]).unwrap(), obj.per_sample_grad(&q, 3).unwrap());
        assert!(matches!(obj.batch_grad(&q, &[]), Err(Error::EmptyBatch)));
        // duplicates count with multiplicity
        let (l_dup, g_dup) = obj.batch_grad(&q, &[1, 1, 2]).unwrap();
        let (l1, g1) = obj.per_sample_grad(&q, 1).unwrap();
        let (l2, g2) = obj.per_sample_grad(&q, 2).unwrap();
        assert!((l_dup - (2.0 * l1 + l2) / 3.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((g_dup[j] - (2.0 * g1[j] + g2[j]) / 3.0).abs() < 1e-12);
        }
        // disjoint union is the size-weighted average
        let s1 = [0usize, 4, 5];
        let s2 = [1usize, 7];
        let union = [0usize, 4, 5, 1, 7];
        let (la, ga) = obj.batch_grad(&q, &s1).unwrap();
        let (lb, gb) = obj.batch_grad(&q, &s2).unwrap();
        let (lu, gu) = obj.batch_grad(&q, &union).unwrap();
        assert!((lu - (3.0 * la + 2.0 * lb) / 5.0).abs() < 1e-12);
        for j in 0..3 {
            assert!((gu[j] - (3.0 * ga[j] + 2.0 * gb[j]) / 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pl_instance_identity_and_errors() {
        let Objective::Quadratic(q) = make_pl_instance(3, 1.0, 1.0, 0).unwrap() else { panic!() };
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert!((q.hessian()[r * 3 + c] - want).abs() < 1e-12);
            }
        }
        assert!(make_pl_instance(3, 0.0, 1.0, 0).is_err());
        assert!(make_pl_instance(3, 2.0, 1.0, 0).is_err());
        assert!(make_pl_instance(1, 0.5, 1.0, 0).is_err());
    }

    #[test]
    fn saturating_task_places_weights_beyond_clip() {
        let task = saturating_task(64, 40, 8, 0.3, 0.1, 2).unwrap();
        assert_eq!(task.saturated.len(), 12);
        for g in 0..5 {
            let m = task.w_init[g * 8..(g + 1) * 8].iter().fold(0.0f64, |a, b| a.max(b.abs()));
            assert_eq!(m, 1.0);
        }
        let beyond = task.w_star.iter().filter(|w| w.abs() > 1.0).count();
        assert_eq!(beyond, 12);
    }

    #[test]
    fn csv_loader_reads_header_and_rows() {
        let dir = std::env::temp_dir().join(format!("qatlab-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        std::fs::write(&path, "x1,x2,y\n1,0,2\n0.5,1,3\n").unwrap();
        let d = Dataset::from_csv(&path).unwrap();
        assert_eq!(d.inputs, vec![vec![1.0, 0.0], vec![0.5, 1.0]]);
        assert_eq!(d.targets, vec![2.0, 3.0]);
        std::fs::write(&path, "1,0,2\n1,x,3\n").unwrap();
        assert!(Dataset::from_csv(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
