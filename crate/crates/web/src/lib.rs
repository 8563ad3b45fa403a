//! Three demo operations for the static page in `www/`. Each returns a flat
//! `f64` buffer; the layouts are documented per function.

use qatlab::diagnostics::{group_means, MonteCarlo};
use qatlab::objectives::saturating_task;
use qatlab::quant::{BitsMode, QuantSpec, Quantizer, ScaleMode};
use qatlab::trainer::{self, JacMode, Refresh, TrainConfig};
use qatlab::{Error, ProbeConfig, ProbeScale, Result, SurrogateJacobian};

pub fn parse_bits(name: &str) -> Result<BitsMode> {
    Ok(match name {
        "w1" => BitsMode::W1,
        "w1_58" => BitsMode::W1_58,
        "w2" => BitsMode::W2,
        "w2_asym" => BitsMode::W2Asym,
        "identity" => BitsMode::Identity,
        other => match other.parse::<u32>() {
            Ok(b) => BitsMode::Generic(b),
            Err(_) => return Err(Error::InvalidArgument(format!("unknown bit mode {other:?}"))),
        },
    })
}

/// Q, the dither mean field m and the sensitivity J on `points` weights
/// spread over `[-span, span]`. Rows of `[w, q, m, j]`, flattened.
pub fn quantizer_curves(
    bits: &str,
    step: f64,
    span: f64,
    points: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if points < 2 || span.is_nan() || span <= 0.0 {
        return Err(Error::InvalidArgument("need points >= 2 and span > 0".into()));
    }
    let quantizer = Quantizer::uniform(QuantSpec::new(parse_bits(bits)?, step, points)?, points)?;
    let w: Vec<f64> = (0..points).map(|i| -span + 2.0 * span * i as f64 / (points - 1) as f64).collect();
    let q = quantizer.quantize(&w)?;
    let m = quantizer.mean_field(&w, samples, seed)?;
    let j = quantizer.mean_field_sensitivity(&w, Some(step / 10.0), samples, seed ^ 1)?;
    Ok((0..points).flat_map(|i| [w[i], q[i], m[i], j[i]]).collect())
}

/// Dither updates of one group's gain on frozen weights, a share of which
/// sit beyond the clip level. Layout: `[target, b_1, ..., b_updates]`.
pub fn gain_tracking(saturated_share: f64, updates: usize, ema_rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&saturated_share) {
        return Err(Error::InvalidArgument("saturated_share must be in [0, 1]".into()));
    }
    const D: usize = 64;
    let spec = QuantSpec::new(BitsMode::Generic(3), 1.0, D)?;
    let quantizer = Quantizer::uniform(spec, D)?;
    let c = spec.clip_codes as f64;
    let saturated = (saturated_share * D as f64).round() as usize;
    let w: Vec<f64> = (0..D)
        .map(|i| {
            let phase = (i as f64 + 0.5) / D as f64;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            if i < saturated {
                sign * (c + 2.0 + phase)
            } else {
                sign * (c - 1.0) * phase
            }
        })
        .collect();
    let target = group_means(&quantizer, &MonteCarlo::new(20_000, seed).sensitivity(&quantizer, &w)?).mean[0];
    let mut gains = SurrogateJacobian::from_gains(vec![1.0], ema_rate, 0.0, 1.0)?;
    let cfg = ProbeConfig { sigma: ProbeScale::StepFraction(0.5), num_probes: 1, seed_tag: seed };
    let mut out = Vec::with_capacity(updates + 1);
    out.push(target);
    for t in 0..updates {
        gains.dither_update(&quantizer, &w, &cfg, t as u64)?;
        out.push(gains.gains[0]);
    }
    Ok(out)
}

/// Per-step training loss of STE and of probe-learned gains on the
/// saturating task. Layout: `[ste_1..ste_steps, learned_1..learned_steps]`.
pub fn loss_traces(saturated_fraction: f64, steps: usize, stepsize: f64, seed: u64) -> Result<Vec<f64>> {
    let task = saturating_task(256, 64, 16, saturated_fraction, 0.1, seed)?;
    let quantizer = Quantizer::build(QuantSpec::new(BitsMode::W2, 1.0, 16)?, ScaleMode::MaxAbs, &task.w_init)?;
    let learned = TrainConfig {
        stepsize,
        batch_size: 8,
        steps,
        refresh: Refresh::Interval(25),
        jac_mode: JacMode::Probe,
        seed,
        ..Default::default()
    };
    let ste = TrainConfig { jac_mode: JacMode::Ste, ..learned.clone() };
    let mut out = Vec::with_capacity(2 * steps);
    for cfg in [&ste, &learned] {
        let run = trainer::train_base(&task.objective, &task.w_init, &quantizer, cfg)?;
        out.extend(run.trace.iter().map(|r| r.loss));
    }
    Ok(out)
}

#[cfg(target_arch = "wasm32")]
mod bindings {
    use wasm_bindgen::prelude::*;

    fn js(err: qatlab::Error) -> JsError {
        JsError::new(&err.to_string())
    }

    #[wasm_bindgen(js_name = quantizerCurves)]
    pub fn quantizer_curves(
        bits: &str,
        step: f64,
        span: f64,
        points: usize,
        samples: usize,
        seed: u64,
    ) -> Result<Vec<f64>, JsError> {
        super::quantizer_curves(bits, step, span, points, samples, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = gainTracking)]
    pub fn gain_tracking(saturated_share: f64, updates: usize, ema_rate: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        super::gain_tracking(saturated_share, updates, ema_rate, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = lossTraces)]
    pub fn loss_traces(saturated_fraction: f64, steps: usize, stepsize: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        super::loss_traces(saturated_fraction, steps, stepsize, seed).map_err(js)
    }
}
