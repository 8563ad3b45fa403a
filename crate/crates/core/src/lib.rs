//! Quantization-aware training laboratory.
//!
//! The backward pass through a hard quantizer is modelled by a learned,
//! per-group surrogate Jacobian `B(W)` instead of the straight-through
//! identity. The crate provides the quantizer and its dither-smoothed
//! reference, the probe/dither gain estimators, variance-reduced gradient
//! estimators, the training loops and a set of numerical diagnostics.

// `!(x >= 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod jacobian;
pub mod metrics;
pub mod objectives;
pub mod quant;
pub mod rng;
pub mod trainer;
pub mod vrgrad;

pub use error::{Error, Result};
pub use jacobian::{ProbeConfig, ProbeScale, SurrogateJacobian};
pub use objectives::{Dataset, Objective};
pub use quant::{BitsMode, DitherDraw, GroupLayout, GroupedWeights, QuantSpec, Quantizer, ScaleMode};
pub use trainer::{JacMode, MetricsRecord, Refresh, TrainConfig};
pub use vrgrad::{VrMode, VrState};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T, U>(items: &[T], f: impl Fn(&T) -> U) -> Vec<U> {
    items.iter().map(f).collect()
}
