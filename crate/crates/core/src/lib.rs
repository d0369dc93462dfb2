//! Multi-scan generalized labeled multi-Bernoulli (GLMB) smoothing for
//! interacting objects.
//!
//! The library models a set of labeled trajectories over a window of scans
//! and propagates a truncated multi-scan GLMB posterior through time:
//!
//! - [`rfs`] — labels, label-set sequences, multi-scan GLMB hypotheses,
//!   multi-scan exponentials, cardinality distributions, normalization and
//!   truncation.
//! - [`densities`] — Gaussian machinery: joint trajectory densities,
//!   unscented transform, conditional updates, KL divergence.
//! - [`dynamics`] — LMB birth, survival, and the repulsive social-force
//!   transition with RK4 integration.
//! - [`measurement`] — detection factors, association maps, sensors, clutter,
//!   merged-measurement likelihoods, and measurement simulation.
//! - [`recursion`] — exact interacting-posterior prediction/update and the
//!   cardinality-matched product-form approximations.
//! - [`gibbs`] — factor sampling and the multi-scan Gibbs sampler over
//!   extended association histories.
//! - [`smoothing`] — the smoothing-while-filtering approximation, window
//!   marginalization, and the overlapping sliding-window driver.
//! - [`metrics`] — OSPA and OSPA² trajectory error metrics.
//! - [`scenario`] — scenario configuration, ground-truth generation, and the
//!   Monte Carlo experiment driver used by the CLI.

pub mod densities;
pub mod dynamics;
pub mod gibbs;
mod error;
pub mod measurement;
pub mod model;
pub mod recursion;
pub mod rfs;
pub mod metrics;
pub mod scenario;
pub mod smoothing;

pub use error::{Error, Result};

/// Numerically stable log(Σ exp(v)) over a slice; -inf for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Wraps a bearing to [0, 2*pi).
pub fn wrap_bearing(a: f64) -> f64 {
    a.rem_euclid(std::f64::consts::TAU)
}
