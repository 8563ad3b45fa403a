//! TOML run configuration.
//!
//! Only `[objective] kind` is required; every other key has a default.
//! Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [objective]
//! kind = "saturating_linear"   # saturating_linear | linear_regression |
//! n = 256                      # logistic_regression | mlp | pl_quadratic | csv
//! dim = 64
//!
//! [quant]
//! bits = "w2"                  # w1 | w1_58 | w2 | w2_asym | identity | { generic = 4 }
//! step = 1.0
//! scale = "max_abs"            # max_abs | fixed
//! group_size = 128
//!
//! [train]
//! algorithm = "vr"             # vr | base
//! stepsize = 0.05
//! batch_size = 8
//! steps = 1000
//! refresh = { interval = 100 } # or { probability = 0.01 }
//! jac_mode = "probe"           # ste | probe | probe_ls | dither
//! vr_mode = "svrg"             # plain | svrg | saga | sarah
//! ema_rate = 0.9
//!
//! [sweep]
//! group_sizes = [8, 32, 128]
//! intervals = [10, 100]
//! jac_modes = ["ste", "probe"]
//! ```

use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::jacobian::{ProbeConfig, DEFAULT_EMA_RATE};
use crate::objectives::{
    linear_regression, logistic_regression, make_pl_instance, mlp_regression, saturating_task, Dataset, Objective,
};
use crate::quant::{BitsMode, QuantSpec, Quantizer, ScaleMode};
use crate::rng::{stream_rng, Stream};
use crate::trainer::{Algorithm, JacMode, Refresh, SweepGrid, TrainConfig};
use crate::vrgrad::VrMode;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub quant: QuantSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    SaturatingLinear(SaturatingParams),
    LinearRegression(RegressionParams),
    LogisticRegression(ClassificationParams),
    Mlp(MlpParams),
    PlQuadratic(PlParams),
    Csv(CsvParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaturatingParams {
    pub n: usize,
    pub dim: usize,
    pub saturated_fraction: f64,
    pub noise: f64,
}

impl Default for SaturatingParams {
    fn default() -> Self {
        SaturatingParams { n: 256, dim: 64, saturated_fraction: 0.3, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionParams {
    pub n: usize,
    pub dim: usize,
    pub noise: f64,
}

impl Default for RegressionParams {
    fn default() -> Self {
        RegressionParams { n: 256, dim: 32, noise: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassificationParams {
    pub n: usize,
    pub dim: usize,
}

impl Default for ClassificationParams {
    fn default() -> Self {
        ClassificationParams { n: 256, dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpParams {
    pub n: usize,
    pub inputs: usize,
    pub hidden: usize,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams { n: 128, inputs: 4, hidden: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlParams {
    pub dim: usize,
    pub mu: f64,
    pub l_smooth: f64,
}

impl Default for PlParams {
    fn default() -> Self {
        PlParams { dim: 16, mu: 0.1, l_smooth: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsvTask {
    #[default]
    Linear,
    Logistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvParams {
    /// Relative paths resolve against the config file's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub task: CsvTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSection {
    pub bits: BitsMode,
    pub step: f64,
    pub scale: ScaleMode,
    pub group_size: usize,
}

impl Default for QuantSection {
    fn default() -> Self {
        QuantSection { bits: BitsMode::W2, step: 1.0, scale: ScaleMode::MaxAbs, group_size: 128 }
    }
}

impl QuantSection {
    pub fn spec(&self) -> Result<QuantSpec> {
        QuantSpec::new(self.bits, self.step, self.group_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub algorithm: Algorithm,
    pub stepsize: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub refresh: Refresh,
    pub jac_mode: JacMode,
    pub vr_mode: VrMode,
    pub allow_plain: bool,
    pub ema_rate: f64,
    pub probe: ProbeConfig,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            algorithm: Algorithm::Vr,
            stepsize: t.stepsize,
            batch_size: t.batch_size,
            steps: t.steps,
            refresh: t.refresh,
            jac_mode: t.jac_mode,
            vr_mode: t.vr_mode,
            allow_plain: t.allow_plain,
            ema_rate: DEFAULT_EMA_RATE,
            probe: t.probe,
            clip_lo: t.clip_lo,
            clip_hi: t.clip_hi,
        }
    }
}

impl TrainSection {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            stepsize: self.stepsize,
            batch_size: self.batch_size,
            steps: self.steps,
            refresh: self.refresh,
            jac_mode: self.jac_mode,
            vr_mode: self.vr_mode,
            ema_rate: self.ema_rate,
            probe: self.probe,
            clip_lo: self.clip_lo,
            clip_hi: self.clip_hi,
            allow_plain: self.allow_plain,
            seed,
        }
    }
}

/// Everything a run needs, materialised from a [`RunConfig`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub objective: Objective,
    pub w0: Vec<f64>,
    pub spec: QuantSpec,
    pub scale: ScaleMode,
    pub quantizer: Quantizer,
    pub train: TrainConfig,
    pub algorithm: Algorithm,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let ObjectiveSpec::Csv(p) = &mut cfg.objective {
            if p.path.is_relative() {
                if let Some(dir) = path.parent() {
                    p.path = dir.join(&p.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds the TOML integer range", self.seed)));
        }
        self.quant.spec().map_err(named("quant"))?;
        self.train_config().validate().map_err(named("train"))?;
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("objective.{name} must be >= 1")))
            } else {
                Ok(())
            }
        };
        match &self.objective {
            ObjectiveSpec::SaturatingLinear(p) => {
                positive("n", p.n)?;
                positive("dim", p.dim)?;
                if !(0.0..=1.0).contains(&p.saturated_fraction) {
                    return Err(Error::Config("objective.saturated_fraction out of [0,1]".into()));
                }
                non_negative("noise", p.noise)?;
            }
            ObjectiveSpec::LinearRegression(p) => {
                positive("n", p.n)?;
                positive("dim", p.dim)?;
                non_negative("noise", p.noise)?;
            }
            ObjectiveSpec::LogisticRegression(p) => {
                positive("n", p.n)?;
                positive("dim", p.dim)?;
            }
            ObjectiveSpec::Mlp(p) => {
                positive("n", p.n)?;
                positive("inputs", p.inputs)?;
                positive("hidden", p.hidden)?;
            }
            ObjectiveSpec::PlQuadratic(p) => {
                positive("dim", p.dim)?;
                if !(p.mu > 0.0 && p.mu <= p.l_smooth && p.l_smooth.is_finite()) {
                    return Err(Error::Config("objective.mu/l_smooth need 0 < mu <= l_smooth".into()));
                }
            }
            ObjectiveSpec::Csv(_) => {}
        }
        if let Some(sweep) = &self.sweep {
            if sweep.cells().is_empty() {
                return Err(Error::Config("sweep grid is empty".into()));
            }
            if sweep.group_sizes.contains(&0) || sweep.intervals.contains(&0) {
                return Err(Error::Config("sweep group_sizes and intervals must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Experiment> {
        let seed = self.seed;
        let spec = self.quant.spec()?;
        let (objective, w0) = match &self.objective {
            ObjectiveSpec::SaturatingLinear(p) => {
                let task = saturating_task(p.n, p.dim, spec.group_size, p.saturated_fraction, p.noise, seed)?;
                (task.objective, task.w_init)
            }
            ObjectiveSpec::LinearRegression(p) => with_init(linear_regression(p.n, p.dim, p.noise, seed)?.0, seed),
            ObjectiveSpec::LogisticRegression(p) => with_init(logistic_regression(p.n, p.dim, seed)?.0, seed),
            ObjectiveSpec::Mlp(p) => with_init(mlp_regression(p.n, p.inputs, p.hidden, seed)?.0, seed),
            ObjectiveSpec::PlQuadratic(p) => with_init(make_pl_instance(p.dim, p.mu, p.l_smooth, seed)?, seed),
            ObjectiveSpec::Csv(p) => {
                let data = Dataset::from_csv(&p.path)?;
                let obj = match p.task {
                    CsvTask::Linear => Objective::LinearRegression(data),
                    CsvTask::Logistic => Objective::LogisticRegression(data),
                };
                with_init(obj, seed)
            }
        };
        let quantizer = Quantizer::build(spec, self.quant.scale, &w0)?;
        Ok(Experiment {
            objective,
            w0,
            spec,
            scale: self.quant.scale,
            quantizer,
            train: self.train_config(),
            algorithm: self.train.algorithm,
        })
    }
}

fn named(section: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config(format!("[{section}] {e}"))
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("objective.{name} must be finite and >= 0")))
    }
}

/// Initial weights `U[-1, 1]` from the init stream.
fn with_init(objective: Objective, seed: u64) -> (Objective, Vec<f64>) {
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let dist = Uniform::new_inclusive(-1.0, 1.0).expect("valid bounds");
    let w0 = (0..objective.dim()).map(|_| dist.sample(&mut rng)).collect();
    (objective, w0)
}
