//! Grouped symmetric uniform quantization, subtractive dithering and the
//! dither-smoothed (mean-field) quantizer.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

/// Weight bit-width / grid family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitsMode {
    /// Binary sign grid `{-Δ, +Δ}`, `sign(0) = +1`.
    W1,
    /// Ternary grid `{-Δ, 0, +Δ}`.
    W1_58,
    /// Two-bit mid-tread grid, codes `{-1, 0, 1}`.
    W2,
    /// Two-bit grid using all four codes `{-2, -1, 0, 1}`.
    W2Asym,
    /// `b`-bit mid-tread grid with `c = 2^(b-1) - 1`.
    Generic(u32),
    /// Pass-through map (`Q(w) = w`), used as a reference quantizer.
    Identity,
}

impl BitsMode {
    pub fn default_clip_codes(self) -> Result<u32> {
        match self {
            BitsMode::W1 | BitsMode::W1_58 | BitsMode::W2 | BitsMode::Identity => Ok(1),
            BitsMode::W2Asym => Ok(2),
            BitsMode::Generic(b) if (2..=31).contains(&b) => Ok((1u32 << (b - 1)) - 1),
            BitsMode::Generic(b) => Err(Error::InvalidSpec(format!("generic bit-width {b} not in [2, 31]"))),
        }
    }

    /// Integer code range `(lo, hi)` for a clip level `c`.
    fn code_range(self, clip_codes: u32) -> (f64, f64) {
        let c = f64::from(clip_codes);
        match self {
            BitsMode::W2Asym => (-2.0, 1.0),
            BitsMode::W1 => (-1.0, 1.0),
            _ => (-c, c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub step: f64,
    pub clip_codes: u32,
    pub bits_mode: BitsMode,
    pub group_size: usize,
}

impl QuantSpec {
    /// Spec with the clip level implied by `bits_mode`.
    pub fn new(bits_mode: BitsMode, step: f64, group_size: usize) -> Result<Self> {
        let spec = QuantSpec { step, clip_codes: bits_mode.default_clip_codes()?, bits_mode, group_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidSpec(format!("step must be positive, got {}", self.step)));
        }
        if self.clip_codes < 1 {
            return Err(Error::InvalidSpec("clip_codes must be >= 1".into()));
        }
        if self.group_size < 1 {
            return Err(Error::InvalidSpec("group_size must be >= 1".into()));
        }
        let expected = self.bits_mode.default_clip_codes()?;
        if self.clip_codes != expected {
            return Err(Error::InvalidSpec(format!(
                "{:?} requires clip_codes = {expected}, got {}",
                self.bits_mode, self.clip_codes
            )));
        }
        Ok(())
    }
}

/// How the per-group step is chosen when a quantizer is built from weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Every group uses `QuantSpec::step`.
    Fixed,
    /// `Δ_g = max|W_g| / c`, computed once from the initial weights.
    #[default]
    MaxAbs,
}

/// Partition of `[0, d)` into contiguous, ordered groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    bounds: Vec<Range<usize>>,
    len: usize,
}

impl GroupLayout {
    /// Groups of `group_size`; the final group may be short.
    pub fn contiguous(len: usize, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidSpec("group_size must be >= 1".into()));
        }
        let bounds = (0..len).step_by(group_size).map(|s| s..(s + group_size).min(len)).collect();
        Ok(GroupLayout { bounds, len })
    }

    pub fn from_bounds(bounds: Vec<Range<usize>>, len: usize) -> Result<Self> {
        let mut next = 0;
        for b in &bounds {
            if b.start != next || b.end <= b.start {
                return Err(Error::InvalidSpec(format!("group bounds not contiguous at {b:?}")));
            }
            next = b.end;
        }
        if next != len {
            return Err(Error::InvalidSpec(format!("group bounds cover [0, {next}), expected [0, {len})")));
        }
        Ok(GroupLayout { bounds, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_groups(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[Range<usize>] {
        &self.bounds
    }

    pub fn group(&self, g: usize) -> Range<usize> {
        self.bounds[g].clone()
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.bounds.partition_point(|b| b.end <= i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedWeights {
    pub values: Vec<f64>,
    pub layout: GroupLayout,
}

impl GroupedWeights {
    pub fn new(values: Vec<f64>, group_size: usize) -> Result<Self> {
        let layout = GroupLayout::contiguous(values.len(), group_size)?;
        Ok(GroupedWeights { values, layout })
    }

    pub fn group(&self, g: usize) -> &[f64] {
        &self.values[self.layout.group(g)]
    }
}

/// One subtractive-dither draw, entries in `[-Δ_g/2, Δ_g/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DitherDraw {
    pub r: Vec<f64>,
    pub seed_tag: u64,
}

impl DitherDraw {
    pub fn zeros(len: usize) -> Self {
        DitherDraw { r: vec![0.0; len], seed_tag: 0 }
    }

    pub fn sample<R: Rng>(quantizer: &Quantizer, rng: &mut R, seed_tag: u64) -> Self {
        let mut r = vec![0.0; quantizer.len()];
        for (g, range) in quantizer.layout.bounds().iter().enumerate() {
            let half = quantizer.steps[g] / 2.0;
            for x in &mut r[range.clone()] {
                *x = rng.random_range(-half..=half);
            }
        }
        DitherDraw { r, seed_tag }
    }
}

/// Monte-Carlo estimate with per-coordinate standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// A quantization grid bound to a group layout, with one frozen step per group.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub spec: QuantSpec,
    pub layout: GroupLayout,
    steps: Vec<f64>,
}

impl Quantizer {
    /// Every group uses `spec.step`.
    pub fn uniform(spec: QuantSpec, len: usize) -> Result<Self> {
        spec.validate()?;
        let layout = GroupLayout::contiguous(len, spec.group_size)?;
        let steps = vec![spec.step; layout.num_groups()];
        Ok(Quantizer { spec, layout, steps })
    }

    /// Freezes `Δ_g = max|W_g| / c`; all-zero groups fall back to `spec.step`.
    pub fn calibrated(spec: QuantSpec, weights: &[f64]) -> Result<Self> {
        check_finite(weights)?;
        let mut q = Quantizer::uniform(spec, weights.len())?;
        let c = f64::from(spec.clip_codes);
        for (g, range) in q.layout.bounds.iter().enumerate() {
            let max_abs = weights[range.clone()].iter().fold(0.0f64, |m, w| m.max(w.abs()));
            if max_abs > 0.0 {
                q.steps[g] = max_abs / c;
            }
        }
        Ok(q)
    }

    pub fn build(spec: QuantSpec, scale: ScaleMode, weights: &[f64]) -> Result<Self> {
        match scale {
            ScaleMode::Fixed => Quantizer::uniform(spec, weights.len()),
            ScaleMode::MaxAbs => Quantizer::calibrated(spec, weights),
        }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn step_of(&self, i: usize) -> f64 {
        self.steps[self.layout.group_of(i)]
    }

    /// Hard quantizer for a single value in a group with step `step`.
    #[inline]
    pub fn quantize_value(&self, w: f64, step: f64) -> f64 {
        match self.spec.bits_mode {
            BitsMode::Identity => w,
            BitsMode::W1 => {
                if w >= 0.0 {
                    step
                } else {
                    -step
                }
            }
            mode => {
                let (lo, hi) = mode.code_range(self.spec.clip_codes);
                step * (w / step).round().clamp(lo, hi)
            }
        }
    }

    pub fn quantize(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_len(w.len())?;
        check_finite(w)?;
        let mut out = vec![0.0; w.len()];
        self.quantize_into(w, &mut out);
        Ok(out)
    }

    /// Unchecked variant for hot loops; `w` must be finite and of full length.
    pub fn quantize_into(&self, w: &[f64], out: &mut [f64]) {
        for (g, range) in self.layout.bounds.iter().enumerate() {
            let step = self.steps[g];
            for i in range.clone() {
                out[i] = self.quantize_value(w[i], step);
            }
        }
    }

    /// `Q(W + r) - r`.
    pub fn dither_quantize(&self, w: &[f64], dither: &DitherDraw) -> Result<Vec<f64>> {
        self.check_len(w.len())?;
        self.check_len(dither.r.len())?;
        check_finite(w)?;
        self.check_dither(&dither.r)?;
        let mut out = vec![0.0; w.len()];
        for (g, range) in self.layout.bounds.iter().enumerate() {
            let step = self.steps[g];
            for i in range.clone() {
                out[i] = self.quantize_value(w[i] + dither.r[i], step) - dither.r[i];
            }
        }
        Ok(out)
    }

    pub fn check_dither(&self, r: &[f64]) -> Result<()> {
        for (g, range) in self.layout.bounds.iter().enumerate() {
            let half = self.steps[g] / 2.0;
            for i in range.clone() {
                if !(r[i].abs() <= half) {
                    return Err(Error::InvalidDither { index: i, value: r[i], half_step: half });
                }
            }
        }
        Ok(())
    }

    /// Monte-Carlo estimate of `m(W) = E_r[Q(W + r) - r]`.
    pub fn mean_field(&self, w: &[f64], n_samples: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self.mean_field_stats(w, n_samples, seed)?.mean)
    }

    pub fn mean_field_stats(&self, w: &[f64], n_samples: usize, seed: u64) -> Result<McEstimate> {
        self.mc_per_coordinate(w, n_samples, seed, |step, wi, r| self.quantize_value(wi + r, step) - r)
    }

    /// Central difference of the mean field with common random numbers for
    /// both evaluations. `probe_eps = None` uses `Δ_g / 100`.
    pub fn mean_field_sensitivity(
        &self,
        w: &[f64],
        probe_eps: Option<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        Ok(self.mean_field_sensitivity_stats(w, probe_eps, n_samples, seed)?.mean)
    }

    pub fn mean_field_sensitivity_stats(
        &self,
        w: &[f64],
        probe_eps: Option<f64>,
        n_samples: usize,
        seed: u64,
    ) -> Result<McEstimate> {
        if let Some(eps) = probe_eps {
            if !(eps.is_finite() && eps > 0.0) {
                return Err(Error::InvalidArgument(format!("probe_eps must be positive, got {eps}")));
            }
        }
        self.mc_per_coordinate(w, n_samples, seed, |step, wi, r| {
            let eps = probe_eps.unwrap_or(step / 100.0);
            let up = self.quantize_value(wi + eps + r, step) - r;
            let down = self.quantize_value(wi - eps + r, step) - r;
            (up - down) / (2.0 * eps)
        })
    }

    fn mc_per_coordinate<F>(&self, w: &[f64], n_samples: usize, seed: u64, sample: F) -> Result<McEstimate>
    where
        F: Fn(f64, f64, f64) -> f64,
    {
        self.check_len(w.len())?;
        check_finite(w)?;
        if n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
        }
        let mut sum = vec![0.0; w.len()];
        let mut sum_sq = vec![0.0; w.len()];
        for (g, range) in self.layout.bounds.iter().enumerate() {
            let step = self.steps[g];
            let half = step / 2.0;
            let mut rng = stream_rng(seed, Stream::Dither, g as u64);
            for _ in 0..n_samples {
                for i in range.clone() {
                    let r = rng.random_range(-half..=half);
                    let x = sample(step, w[i], r);
                    sum[i] += x;
                    sum_sq[i] += x * x;
                }
            }
        }
        let n = n_samples as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std_err = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| {
                if n_samples < 2 {
                    return f64::INFINITY;
                }
                let var = ((sq / n - m * m) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect();
        Ok(McEstimate { mean, std_err })
    }

    /// Weight-space interval outside which the dithered quantizer no longer
    /// responds (mean-field sensitivity is zero).
    pub fn responsive_range(&self, g: usize) -> (f64, f64) {
        let step = self.steps[g];
        match self.spec.bits_mode {
            BitsMode::Identity => (f64::NEG_INFINITY, f64::INFINITY),
            BitsMode::W1 => (-step / 2.0, step / 2.0),
            mode => {
                let (lo, hi) = mode.code_range(self.spec.clip_codes);
                (lo * step, hi * step)
            }
        }
    }

    pub fn is_saturated(&self, i: usize, w: f64) -> bool {
        let (lo, hi) = self.responsive_range(self.layout.group_of(i));
        w >= hi || w <= lo
    }

    pub fn saturated_fraction(&self, w: &[f64]) -> f64 {
        if w.is_empty() {
            return 0.0;
        }
        let count = w.iter().enumerate().filter(|(i, x)| self.is_saturated(*i, **x)).count();
        count as f64 / w.len() as f64
    }

    fn check_len(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got });
        }
        Ok(())
    }
}

pub(crate) fn check_finite(w: &[f64]) -> Result<()> {
    match w.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::NonFiniteWeight(i)),
        None => Ok(()),
    }
}

/// Quantizes `W` with a single step taken from `spec`.
pub fn quantize(w: &GroupedWeights, spec: &QuantSpec) -> Result<Vec<f64>> {
    Quantizer::uniform(*spec, w.values.len())?.quantize(&w.values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quantizer(mode: BitsMode, step: f64, len: usize) -> Quantizer {
        Quantizer::uniform(QuantSpec::new(mode, step, 4).unwrap(), len).unwrap()
    }

    /// Mean-field sensitivity of a mid-tread clipped grid in closed form:
    /// number of decision thresholds `(k + 1/2)Δ` strictly within `Δ/2` of `w`.
    // Thresholds (k + 1/2)Δ within Δ/2 of w; kinks of the mean field sit on
    // grid points, where the two one-sided counts are averaged.
    fn exact_sensitivity(w: f64, step: f64, lo: i64, hi: i64) -> f64 {
        let count = |x: f64| (lo..hi).filter(|k| ((*k as f64 + 0.5) * step - x).abs() < step / 2.0).count() as f64;
        let h = 1e-9 * step;
        0.5 * (count(w - h) + count(w + h))
    }

    #[test]
    fn trivial_examples() {
        let q = quantizer(BitsMode::W2, 1.0, 1);
        assert_eq!(q.quantize(&[0.4]).unwrap(), vec![0.0]);
        assert_eq!(q.quantize(&[3.7]).unwrap(), vec![1.0]);
        let t = quantizer(BitsMode::W1_58, 0.5, 1);
        assert_eq!(t.quantize(&[-0.6]).unwrap(), vec![-0.5]);
    }

    #[test]
    fn w1_58_matches_nearest_grid_point() {
        let t = quantizer(BitsMode::W1_58, 0.5, 1);
        let grid = [-0.5, 0.0, 0.5];
        for w in [-0.6, -0.26, -0.1, 0.1, 0.3, 2.0] {
            let nearest = grid
                .iter()
                .copied()
                .min_by(|a: &f64, b: &f64| (a - w).abs().partial_cmp(&(b - w).abs()).unwrap())
                .unwrap();
            assert_eq!(t.quantize(&[w]).unwrap()[0], nearest, "w = {w}");
        }
    }

    #[test]
    fn ties_round_away_from_zero_and_sign_of_zero() {
        let q = quantizer(BitsMode::Generic(4), 1.0, 2);
        assert_eq!(q.quantize(&[0.5, -0.5]).unwrap(), vec![1.0, -1.0]);
        let s = quantizer(BitsMode::W1, 0.3, 3);
        assert_eq!(s.quantize(&[0.0, -0.0, -1e-9]).unwrap(), vec![0.3, 0.3, -0.3]);
    }

    #[test]
    fn w2_asym_uses_four_codes() {
        let q = quantizer(BitsMode::W2Asym, 1.0, 4);
        assert_eq!(q.quantize(&[-9.0, -1.2, 0.2, 9.0]).unwrap(), vec![-2.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_and_bad_dither_rejected() {
        let q = quantizer(BitsMode::W2, 1.0, 2);
        assert!(matches!(q.quantize(&[0.0, f64::NAN]), Err(Error::NonFiniteWeight(1))));
        let bad = DitherDraw { r: vec![0.0, 0.6], seed_tag: 0 };
        assert!(matches!(q.dither_quantize(&[0.0, 0.0], &bad), Err(Error::InvalidDither { index: 1, .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(QuantSpec::new(BitsMode::W2, 0.0, 4).is_err());
        assert!(QuantSpec::new(BitsMode::Generic(1), 1.0, 4).is_err());
        let mut s = QuantSpec::new(BitsMode::Generic(3), 1.0, 4).unwrap();
        assert_eq!(s.clip_codes, 3);
        s.clip_codes = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn dither_examples() {
        let q = quantizer(BitsMode::Generic(3), 1.0, 1);
        let zero = DitherDraw::zeros(1);
        assert_eq!(q.dither_quantize(&[0.2], &zero).unwrap(), q.quantize(&[0.2]).unwrap());
        // deep saturation: clip active for every dither
        for r in [-0.5, -0.1, 0.0, 0.3, 0.5] {
            let d = DitherDraw { r: vec![r], seed_tag: 0 };
            let out = q.dither_quantize(&[30.0], &d).unwrap()[0];
            assert!((out - (3.0 - r)).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_field_limits() {
        let q = quantizer(BitsMode::Generic(3), 1.0, 3);
        let est = q.mean_field_stats(&[0.0, 100.0, 1.3], 20_000, 5).unwrap();
        assert!(est.mean[0].abs() <= 4.0 * est.std_err[0]);
        assert!((est.mean[1] - 3.0).abs() <= 4.0 * est.std_err[1] + 1e-12);
        assert!((est.mean[2] - 1.3).abs() <= 4.0 * est.std_err[2]);
    }

    #[test]
    fn sensitivity_interior_saturated_knee() {
        // c = 1, Δ = 1: interior |w| < 1, knee at w = 1.
        let q = quantizer(BitsMode::W2, 1.0, 3);
        let j = q.mean_field_sensitivity_stats(&[0.3, 5.0, 1.0], None, 200_000, 11).unwrap();
        assert!((j.mean[0] - 1.0).abs() <= 4.0 * j.std_err[0], "{:?}", j);
        assert_eq!(j.mean[1], 0.0);
        assert!((j.mean[2] - 0.5).abs() <= 4.0 * j.std_err[2], "{:?}", j);
    }

    #[test]
    fn sensitivity_matches_threshold_count_oracle() {
        let q = quantizer(BitsMode::Generic(3), 1.0, 8);
        let w = [-3.7, -2.2, -0.9, 0.0, 0.45, 1.8, 2.6, 3.4];
        let j = q.mean_field_sensitivity_stats(&w, Some(0.05), 100_000, 3).unwrap();
        for (i, wi) in w.iter().enumerate() {
            let exact = exact_sensitivity(*wi, 1.0, -3, 3);
            assert!((j.mean[i] - exact).abs() <= 4.0 * j.std_err[i] + 1e-12, "w={wi} {} vs {exact}", j.mean[i]);
        }
    }

    #[test]
    fn layout_group_lookup() {
        let l = GroupLayout::contiguous(10, 4).unwrap();
        assert_eq!(l.num_groups(), 3);
        assert_eq!(l.group(2), 8..10);
        assert_eq!((0..10).map(|i| l.group_of(i)).collect::<Vec<_>>(), vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2]);
        assert!(GroupLayout::from_bounds(vec![0..3, 4..6], 6).is_err());
        assert!(GroupLayout::from_bounds(vec![0..3, 3..6], 6).is_ok());
    }

    #[test]
    fn calibrated_steps_freeze_max_abs() {
        let spec = QuantSpec::new(BitsMode::Generic(3), 1.0, 2).unwrap();
        let q = Quantizer::calibrated(spec, &[0.3, -0.6, 0.0, 0.0, 1.5]).unwrap();
        for (a, b) in q.steps().iter().zip([0.2, 1.0, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn modes() -> impl Strategy<Value = BitsMode> {
        prop_oneof![
            Just(BitsMode::W1),
            Just(BitsMode::W1_58),
            Just(BitsMode::W2),
            Just(BitsMode::W2Asym),
            (2u32..9).prop_map(BitsMode::Generic),
        ]
    }

    proptest! {
        #[test]
        fn grid_membership_idempotence_monotonicity(
            mode in modes(),
            step in 0.01f64..3.0,
            a in -50.0f64..50.0,
            b in -50.0f64..50.0,
        ) {
            let q = quantizer(mode, step, 1);
            let qa = q.quantize(&[a]).unwrap()[0];
            let code = qa / step;
            prop_assert!((code - code.round()).abs() < 1e-9);
            let (lo, hi) = mode.code_range(q.spec.clip_codes);
            prop_assert!(code.round() >= lo && code.round() <= hi);
            if mode == BitsMode::W1 { prop_assert!(code.round().abs() == 1.0); }
            prop_assert_eq!(q.quantize(&[qa]).unwrap()[0], qa);
            let (lo_w, hi_w) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(q.quantize(&[lo_w]).unwrap()[0] <= q.quantize(&[hi_w]).unwrap()[0]);
        }
    }
}
