//! Segmented Ornstein-Uhlenbeck machinery.
//!
//! The forward process `dx = -x dt + √2 dB` has transition law
//! `N(e^{-t} x₀, (1 - e^{-2t}) I)`. Reverse-time simulation and the auxiliary
//! posterior `q(x₀ | x)` used by the score estimator are built on that kernel.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::rng::RngStream;

/// `(e^{-t}, 1 - e^{-2t})`: shrink factor and variance of the forward kernel.
pub fn forward_kernel_params(t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0) {
        return Err(Error::invalid(format!(
            "kernel time must be positive, got {t}"
        )));
    }
    Ok(((-t).exp(), -(-2.0 * t).exp_m1()))
}

/// How the frozen score enters the reverse exponential-integrator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftVariant {
    /// `e^η x + (e^η - 1) v + ξ`, the update as printed in the algorithm.
    #[default]
    Paper,
    /// `e^η x + 2(e^η - 1) v + ξ`, the exact integrator of the reverse
    /// drift `x + 2∇log p` with the score held fixed over the step.
    Factor2,
}

impl DriftVariant {
    fn score_coefficient(self, eta: f64) -> f64 {
        match self {
            DriftVariant::Paper => eta.exp_m1(),
            DriftVariant::Factor2 => 2.0 * eta.exp_m1(),
        }
    }
}

/// Position on the reverse-time grid: segment `k`, iteration `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeIndex {
    pub segment: usize,
    pub reverse_iter: usize,
}

impl TimeIndex {
    /// Time gap back to the start of the segment: `S - rη`, or `S` at `r = 0`.
    pub fn gap(&self, segment_len: f64, eta: f64) -> f64 {
        gap(self.reverse_iter, segment_len, eta)
    }
}

pub(crate) fn gap(reverse_iter: usize, segment_len: f64, eta: f64) -> f64 {
    if reverse_iter == 0 {
        segment_len
    } else {
        segment_len - reverse_iter as f64 * eta
    }
}

/// One reverse step with externally supplied standard-normal noise `z`
/// (scaled internally by `√(e^{2η} - 1)`).
pub fn reverse_exp_step_with_noise(
    x: &[f64],
    v: &[f64],
    eta: f64,
    variant: DriftVariant,
    z: &[f64],
) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!(
            "reverse step must be positive, got {eta}"
        )));
    }
    check_dim(x.len(), v.len())?;
    check_dim(x.len(), z.len())?;
    let grow = eta.exp();
    let coef = variant.score_coefficient(eta);
    let sd = (2.0 * eta).exp_m1().sqrt();
    Ok(x.iter()
        .zip(v)
        .zip(z)
        .map(|((xi, vi), zi)| grow * xi + coef * vi + sd * zi)
        .collect())
}

pub fn reverse_exp_step(
    x: &[f64],
    v: &[f64],
    eta: f64,
    variant: DriftVariant,
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let z = rng.normal_vec(x.len());
    reverse_exp_step_with_noise(x, v, eta, variant, &z)
}

fn check_gap(t_gap: f64) -> Result<()> {
    if t_gap > 0.0 && t_gap.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "time gap must be positive, got {t_gap}"
        )))
    }
}

/// `(e^{-t'} x_anchor - e^{-2t'} x₀) / (1 - e^{-2t'})`, the gradient in `x₀`
/// of the Gaussian likelihood term of `q(x₀ | x_anchor)`.
pub fn q_score_tilt(x_anchor: &[f64], x0: &[f64], t_gap: f64) -> Result<Vec<f64>> {
    check_gap(t_gap)?;
    check_dim(x_anchor.len(), x0.len())?;
    let mut out = vec![0.0; x0.len()];
    tilt_into(x_anchor, x0, t_gap, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn tilt_into(x_anchor: &[f64], x0: &[f64], t_gap: f64, out: &mut [f64]) {
    let a = (-t_gap).exp();
    let b = (-2.0 * t_gap).exp();
    let denom = -(-2.0 * t_gap).exp_m1();
    for ((o, xa), x) in out.iter_mut().zip(x_anchor).zip(x0) {
        *o = (a * xa - b * x) / denom;
    }
}

/// Draw from `N(e^{t'} x_anchor, (e^{2t'} - 1) I)` given standard-normal `z`.
///
/// This is `exp(-‖x_anchor - e^{-t'} x'‖² / (2(1 - e^{-2t'})))` as a density
/// in `x'`: factoring `e^{-t'}` out of the norm leaves mean `e^{t'} x_anchor`
/// and variance `(1 - e^{-2t'}) e^{2t'} = e^{2t'} - 1`.
pub fn q_init_sample_with_noise(x_anchor: &[f64], t_gap: f64, z: &[f64]) -> Result<Vec<f64>> {
    check_gap(t_gap)?;
    check_dim(x_anchor.len(), z.len())?;
    let scale = t_gap.exp();
    let sd = (2.0 * t_gap).exp_m1().sqrt();
    Ok(x_anchor
        .iter()
        .zip(z)
        .map(|(x, zi)| scale * x + sd * zi)
        .collect())
}

pub fn q_init_sample(x_anchor: &[f64], t_gap: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let z = rng.normal_vec(x_anchor.len());
    q_init_sample_with_noise(x_anchor, t_gap, &z)
}

/// Longest segment for which every auxiliary posterior stays strongly
/// log-concave: `½ log((2L + 1) / 2L)`.
pub fn max_segment_length(smoothness: f64) -> f64 {
    0.5 * (1.0 / (2.0 * smoothness)).ln_1p()
}

/// Strong log-concavity (`mu`) and smoothness (`ell`) constants of the
/// auxiliary posterior at gap `t'`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcavityBounds {
    pub mu: f64,
    pub ell: f64,
}

impl ConcavityBounds {
    /// The formulas without the segment-length check.
    pub fn at(t_gap: f64) -> Self {
        let c = 1.0 / (2.0 * t_gap).exp_m1();
        Self {
            mu: 0.5 * c,
            ell: 1.5 * c,
        }
    }

    /// Largest inner step satisfying `τ ≤ μ / (8 L²)`.
    pub fn max_inner_step(&self) -> f64 {
        self.mu / (8.0 * self.ell * self.ell)
    }
}

/// Checked constants: errors if `t'` exceeds the segment bound for `L`.
pub fn concavity_bounds(t_gap: f64, smoothness: f64) -> Result<ConcavityBounds> {
    check_gap(t_gap)?;
    let s_max = max_segment_length(smoothness);
    if t_gap > s_max {
        return Err(Error::ScheduleViolation(format!(
            "gap {t_gap} exceeds the strong log-concavity segment bound {s_max} for L = {smoothness}"
        )));
    }
    Ok(ConcavityBounds::at(t_gap))
}
