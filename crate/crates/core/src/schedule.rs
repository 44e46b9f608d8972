//! Hyperparameter schedules for the segmented reverse sampler.
//!
//! Two sources: [`theoretical_schedule`] evaluates the closed-form settings
//! under which the convergence guarantee holds (segment length, segment
//! count, step sizes, sample and iteration counts, failure probability);
//! [`practical_schedule`] builds the small desk-scale configurations used in
//! experiments. [`validate`] reports, without failing, every inequality a
//! schedule breaks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ou::{gap, max_segment_length, ConcavityBounds, DriftVariant};

/// Inner Langevin step rule `τ(ε, t')`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRule {
    Fixed(f64),
    /// `2⁻⁵ 3⁻² e^{2t'} (1 - e^{-2t'})² ε / d`.
    Theorem {
        dim: usize,
    },
}

impl TauRule {
    pub fn at(&self, tol: Option<f64>, t_gap: f64) -> Result<f64> {
        match *self {
            TauRule::Fixed(tau) => Ok(tau),
            TauRule::Theorem { dim } => {
                let eps = need_tol(tol)?;
                let one_minus = -(-2.0 * t_gap).exp_m1();
                Ok((2.0 * t_gap).exp() * one_minus * one_minus * eps / (288.0 * dim as f64))
            }
        }
    }
}

/// Number of inner chains `n(ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRule {
    Fixed(u64),
    /// `C_n (d + M) ε⁻² · max{d, -2 log δ}` with the max term capped at `ceiling`.
    Theorem {
        c_n: f64,
        d_plus_m: f64,
        dim: usize,
        log_delta: f64,
        ceiling: f64,
    },
}

impl SampleRule {
    pub fn at(&self, tol: Option<f64>) -> Result<u64> {
        match *self {
            SampleRule::Fixed(n) => Ok(n),
            SampleRule::Theorem {
                c_n,
                d_plus_m,
                dim,
                log_delta,
                ceiling,
            } => {
                let eps = need_tol(tol)?;
                let term = (dim as f64).max(-2.0 * log_delta).min(ceiling);
                Ok(to_count(c_n * d_plus_m * term / (eps * eps)))
            }
        }
    }

    /// Whether the ceiling on `max{d, -2 log δ}` is active.
    pub fn clamped(&self) -> bool {
        match *self {
            SampleRule::Fixed(_) => false,
            SampleRule::Theorem {
                dim,
                log_delta,
                ceiling,
                ..
            } => (dim as f64).max(-2.0 * log_delta) > ceiling,
        }
    }
}

/// Inner iteration count `m(ε, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterRule {
    Fixed(u64),
    /// `C_m (d + M)³ ε⁻³ · max{log ‖x‖², 1}`.
    Theorem {
        c_m: f64,
        d_plus_m: f64,
    },
}

impl IterRule {
    pub fn at(&self, tol: Option<f64>, anchor_norm: f64) -> Result<u64> {
        match *self {
            IterRule::Fixed(m) => Ok(m),
            IterRule::Theorem { c_m, d_plus_m } => {
                let eps = need_tol(tol)?;
                let growth = (anchor_norm * anchor_norm).ln().max(1.0);
                Ok(to_count(c_m * d_plus_m.powi(3) * growth / eps.powi(3)))
            }
        }
    }
}

fn need_tol(tol: Option<f64>) -> Result<f64> {
    tol.ok_or_else(|| Error::invalid("theorem-based rule evaluated without a tolerance"))
}

fn to_count(v: f64) -> u64 {
    if v.is_nan() {
        u64::MAX
    } else {
        // saturating float-to-int cast
        v.ceil().max(1.0) as u64
    }
}

/// Score tolerances: `l(ε) = 10ε` at the top level, divided by `divisor`
/// (960) at every level of recursion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub eps: f64,
    pub top: f64,
    pub divisor: f64,
}

/// All time and recursion hyperparameters of one diffusion run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    /// Segment length `S`.
    pub segment_len: f64,
    /// Segment count `K`.
    pub segments: usize,
    /// Outer step `η`.
    pub eta: f64,
    /// Outer iterations per segment `R`.
    pub iters: usize,
    pub tau: TauRule,
    pub samples: SampleRule,
    pub inner_iters: IterRule,
    pub tolerance: Option<Tolerances>,
    /// `log δ`, kept in log space since `δ` underflows.
    pub log_delta: Option<f64>,
    pub variant: DriftVariant,
    /// Number of final outer iterations replaced by a plain Langevin step on
    /// `-∇f*`.
    pub ula_tail: usize,
    pub ula_tail_step: f64,
}

impl ScheduleParams {
    /// Step taken at iteration `r`; the last one is shortened so each segment
    /// ends exactly at `S`.
    pub fn step_size(&self, r: usize) -> f64 {
        self.eta.min(self.segment_len - r as f64 * self.eta)
    }

    pub fn gap(&self, r: usize) -> f64 {
        gap(r, self.segment_len, self.eta)
    }

    pub fn total_outer(&self) -> usize {
        self.segments * self.iters
    }

    pub fn top_tolerance(&self) -> Option<f64> {
        self.tolerance.map(|t| t.top)
    }

    /// Gradient calls per particle when `n` and `m` are fixed:
    /// `(n·m)^{k+1}` per outer step in segment `k`, one per tail step.
    pub fn grad_cost_per_particle(&self) -> Option<u64> {
        let (SampleRule::Fixed(n), IterRule::Fixed(m)) = (self.samples, self.inner_iters) else {
            return None;
        };
        let nm = n.checked_mul(m)?;
        let total = self.total_outer();
        let mut cost: u64 = 0;
        let mut it = 0usize;
        for k in (0..self.segments).rev() {
            let per_step = nm.checked_pow(k as u32 + 1)?;
            for _ in 0..self.iters {
                let c = if it >= total.saturating_sub(self.ula_tail) {
                    1
                } else {
                    per_step
                };
                cost = cost.checked_add(c)?;
                it += 1;
            }
        }
        Some(cost)
    }

    /// The single-segment schedule covering the same horizon.
    pub fn collapsed(&self) -> Self {
        Self {
            segment_len: self.segments as f64 * self.segment_len,
            segments: 1,
            iters: self.segments * self.iters,
            ..self.clone()
        }
    }
}

/// Knobs of [`theoretical_schedule_with`] that the closed form leaves free.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryOptions {
    /// Bound `Z` on particle norms, entering `δ` through `C_{u,1}`.
    pub max_norm: f64,
    /// Cap on the `max{d, -2 log δ}` factor of `n`.
    pub n_ceiling: f64,
    pub variant: DriftVariant,
}

impl Default for TheoryOptions {
    fn default() -> Self {
        Self {
            max_norm: 10.0,
            n_ceiling: 1e6,
            variant: DriftVariant::Paper,
        }
    }
}

/// Constants of the theoretical schedule that do not depend on `ε` or `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoryConstants {
    pub c_eta: f64,
    pub c_n: f64,
    pub c_m1: f64,
    pub c_m: f64,
    pub c_u1: f64,
    pub c_u2: f64,
    pub c_u3: f64,
}

impl TheoryConstants {
    pub fn new(l: f64, m2: f64, max_norm: f64) -> Self {
        let s = max_segment_length(l);
        let c_eta = 2f64.powi(-14) / (l * l);
        let c_n = 64.0 * 25.0 / c_eta;
        // log(2M·3²·5L) is -∞ at M = 0; its argument is floored at 1.
        let c_m1 = (90.0 * m2 * l).max(1.0).ln() + 3.0 * m2 * l;
        let c_m = 512.0 * 9.0 * 125.0 * c_m1 * c_eta.powf(-1.5);
        let c_u1 = (5.0 * c_n * c_m / 1e4).ln() + (2.0 * max_norm.ln().max(0.5)).ln();
        let c_u2 = 70.0 / (s * s) + 10.0 / s;
        let c_u3 = 2.0 * c_u1 / s;
        Self {
            c_eta,
            c_n,
            c_m1,
            c_m,
            c_u1,
            c_u2,
            c_u3,
        }
    }
}

/// `log δ` from the theorem's nested-power display, evaluated in log space.
pub fn theory_log_delta(l: f64, m2: f64, d: usize, eps: f64, c: &TheoryConstants) -> f64 {
    let s = max_segment_length(l);
    let d = d as f64;
    let ln_a = ((l * d + m2) / eps).ln();
    let outer = 2.0 / s * ln_a;
    let inner = (c.c_eta * s * eps * eps / (4.0 * (d + m2))).ln() - 2.0 * ln_a.ln()
        + (-c.c_u2 * ln_a - c.c_u3) * ln_a;
    -outer * 2f64.ln() + (outer + 1.0) * inner
}

pub fn theoretical_schedule(l: f64, m2: f64, d: usize, eps: f64) -> Result<ScheduleParams> {
    theoretical_schedule_with(l, m2, d, eps, &TheoryOptions::default())
}

pub fn theoretical_schedule_with(
    l: f64,
    m2: f64,
    d: usize,
    eps: f64,
    opts: &TheoryOptions,
) -> Result<ScheduleParams> {
    if !(l >= 1.0 && l.is_finite()) {
        return Err(Error::invalid(format!(
            "smoothness L must be at least 1, got {l}"
        )));
    }
    if !(m2 >= 0.0 && m2.is_finite()) {
        return Err(Error::invalid(format!(
            "second moment M must be nonnegative, got {m2}"
        )));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid(format!(
            "tolerance must lie in (0, 1), got {eps}"
        )));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    let c = TheoryConstants::new(l, m2, opts.max_norm);
    let s = max_segment_length(l);
    let df = d as f64;
    let segments = (2.0 * ((l * df + m2) / eps).ln() / s).ceil() as usize;
    let eta = c.c_eta * eps / (m2 + df);
    let iters = (s / eta).ceil() as usize;
    let log_delta = theory_log_delta(l, m2, d, eps, &c);
    Ok(ScheduleParams {
        segment_len: s,
        segments,
        eta,
        iters,
        tau: TauRule::Theorem { dim: d },
        samples: SampleRule::Theorem {
            c_n: c.c_n,
            d_plus_m: df + m2,
            dim: d,
            log_delta,
            ceiling: opts.n_ceiling,
        },
        inner_iters: IterRule::Theorem {
            c_m: c.c_m,
            d_plus_m: df + m2,
        },
        tolerance: Some(Tolerances {
            eps,
            top: 10.0 * eps,
            divisor: 960.0,
        }),
        log_delta: Some(log_delta),
        variant: opts.variant,
        ula_tail: 0,
        ula_tail_step: 0.0,
    })
}

/// Which inequality a schedule breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// `S ≤ ½ log((2L+1)/2L)`.
    SegmentLength,
    /// `η ≤ ½`.
    OuterStep,
    /// `R = ⌈S/η⌉`, so `R·η` reconstructs `S` within one step.
    Horizon,
    /// `τ(t') ≤ μ(t') / (8 L(t')²)` on the whole grid.
    InnerStep,
    /// Counts and steps must be positive.
    Degenerate,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Constraint::SegmentLength => "segment length S <= 1/2 log((2L+1)/2L)",
            Constraint::OuterStep => "outer step eta <= 1/2",
            Constraint::Horizon => "R = ceil(S/eta)",
            Constraint::InnerStep => "inner step tau <= mu/(8 L_r^2)",
            Constraint::Degenerate => "positive counts and steps",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub constraint: Constraint,
    pub message: String,
    /// `bound - value`; negative when violated.
    pub margin: f64,
}

/// Every broken invariant of `params` for a target with smoothness `l`.
/// Never fails: practical schedules are expected to break the theory.
pub fn validate(params: &ScheduleParams, l: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    if params.segments == 0
        || params.iters == 0
        || !(params.eta > 0.0)
        || !(params.segment_len > 0.0)
    {
        out.push(Violation {
            constraint: Constraint::Degenerate,
            message: format!(
                "K = {}, R = {}, eta = {}, S = {}",
                params.segments, params.iters, params.eta, params.segment_len
            ),
            margin: f64::NEG_INFINITY,
        });
        return out;
    }
    let s_max = max_segment_length(l);
    if params.segment_len > s_max * (1.0 + 1e-12) {
        out.push(Violation {
            constraint: Constraint::SegmentLength,
            message: format!("S = {} exceeds {} for L = {l}", params.segment_len, s_max),
            margin: s_max - params.segment_len,
        });
    }
    if params.eta > 0.5 {
        out.push(Violation {
            constraint: Constraint::OuterStep,
            message: format!("eta = {} exceeds 1/2", params.eta),
            margin: 0.5 - params.eta,
        });
    }
    let r = params.iters as f64;
    let slack = 1e-9 * params.eta;
    if r * params.eta < params.segment_len - slack
        || (r - 1.0) * params.eta >= params.segment_len - slack
    {
        out.push(Violation {
            constraint: Constraint::Horizon,
            message: format!(
                "R * eta = {} does not cover S = {} within one step",
                r * params.eta,
                params.segment_len
            ),
            margin: params.eta - (r * params.eta - params.segment_len).abs(),
        });
    }
    // Worst case of τ - μ/(8L²) over the reverse grid at the top tolerance,
    // the largest tolerance and hence the largest τ.
    let tol = params.top_tolerance();
    let mut worst: Option<(f64, f64, f64)> = None;
    for r in 0..params.iters {
        let t = params.gap(r);
        if !(t > 0.0) {
            continue;
        }
        let Ok(tau) = params.tau.at(tol, t) else {
            continue;
        };
        let bound = ConcavityBounds::at(t).max_inner_step();
        let margin = bound - tau;
        if worst.is_none_or(|(m, _, _)| margin < m) {
            worst = Some((margin, t, tau));
        }
    }
    if let Some((margin, t, tau)) = worst {
        if margin < 0.0 {
            out.push(Violation {
                constraint: Constraint::InnerStep,
                message: format!("tau = {tau} exceeds mu/(8 L_r^2) at t' = {t}"),
                margin,
            });
        }
    }
    out
}

/// Sampler names accepted by configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplerKind {
    #[serde(rename = "ula")]
    Ula,
    #[serde(rename = "dmc")]
    Dmc,
    #[serde(rename = "rsdmc-v1")]
    RsdmcV1,
    #[serde(rename = "rsdmc-v2")]
    RsdmcV2,
}

impl SamplerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SamplerKind::Ula => "ula",
            SamplerKind::Dmc => "dmc",
            SamplerKind::RsdmcV1 => "rsdmc-v1",
            SamplerKind::RsdmcV2 => "rsdmc-v2",
        }
    }
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ula" => Ok(SamplerKind::Ula),
            "dmc" => Ok(SamplerKind::Dmc),
            "rsdmc-v1" => Ok(SamplerKind::RsdmcV1),
            "rsdmc-v2" => Ok(SamplerKind::RsdmcV2),
            other => Err(Error::config(
                "<sampler>",
                format!("unknown sampler {other:?}"),
            )),
        }
    }
}

pub const DEFAULT_SEGMENTS: usize = 2;
pub const DEFAULT_ITERS: usize = 100;
pub const DEFAULT_ETA: f64 = 0.05;
pub const DEFAULT_TAU: f64 = 0.01;
pub const DEFAULT_TAIL: usize = 10;
pub const DEFAULT_ULA_STEP: f64 = 2e-4;
pub const DEFAULT_ULA_STEPS: u64 = 200;
pub const DEFAULT_PARTICLES: usize = 1000;
/// Total reverse horizon `K·R·η` of the default configuration.
pub const DEFAULT_HORIZON: f64 = DEFAULT_SEGMENTS as f64 * DEFAULT_ITERS as f64 * DEFAULT_ETA;

/// One sampler run as read from a config file. Omitted fields take the
/// defaults of [`practical_schedule`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub sampler: SamplerKind,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<usize>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ula_tail: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<DriftVariant>,
    /// Gradient calls per particle. Sets the ULA step count, or `R` for the
    /// diffusion samplers when `R` is omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// ULA step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    /// Step size of the Langevin tail iterations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_step: Option<f64>,
    /// Total reverse horizon `K·R·η`, used to derive `η` when it is omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Path to a mixture JSON file, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl SamplerConfig {
    pub fn new(sampler: SamplerKind) -> Self {
        Self {
            sampler,
            segments: None,
            iters: None,
            eta: None,
            tau: None,
            n: None,
            m: None,
            ula_tail: None,
            variant: None,
            budget: None,
            particles: None,
            seed: None,
            step: None,
            tail_step: None,
            horizon: None,
            target: None,
        }
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = Some(budget);
        self
    }

    pub fn particles(&self) -> usize {
        self.particles.unwrap_or(DEFAULT_PARTICLES)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UlaParams {
    pub step: f64,
    pub steps: u64,
}

/// A resolved sampler configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plan {
    Ula(UlaParams),
    Diffusion {
        sampler: SamplerKind,
        params: ScheduleParams,
    },
}

impl Plan {
    pub fn sampler(&self) -> SamplerKind {
        match self {
            Plan::Ula(_) => SamplerKind::Ula,
            Plan::Diffusion { sampler, .. } => *sampler,
        }
    }

    /// Planned gradient calls per particle, when fixed in advance.
    pub fn grad_cost_per_particle(&self) -> Option<u64> {
        match self {
            Plan::Ula(p) => Some(p.steps),
            Plan::Diffusion { params, .. } => params.grad_cost_per_particle(),
        }
    }
}

/// Resolves a config into a runnable plan.
///
/// Defaults: `rsdmc-v1` uses `K = 2`, `R = 100`, `η = 0.05`, `τ = 0.01`,
/// `n = m = 1`; `rsdmc-v2` adds a 10-iteration Langevin tail; `dmc` is one
/// segment over the same horizon; `ula` takes 200 steps of size `2·10⁻⁴`.
/// With a `budget`, `R` is chosen so the run costs that many gradients per
/// particle and `η` shrinks to keep the horizon `K·R·η` fixed.
pub fn practical_schedule(config: &SamplerConfig) -> Result<Plan> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(Error::config(
                "<sampler>",
                format!("{name} must be positive, got {v}"),
            ))
        }
    };
    if config.sampler == SamplerKind::Ula {
        let step = positive("step", config.step.unwrap_or(DEFAULT_ULA_STEP))?;
        let steps = config.budget.unwrap_or(DEFAULT_ULA_STEPS);
        return Ok(Plan::Ula(UlaParams { step, steps }));
    }

    let segments = match config.sampler {
        SamplerKind::Dmc => {
            if config.segments.is_some_and(|k| k != 1) {
                return Err(Error::config(
                    "<sampler>",
                    "dmc runs a single segment; K must be 1",
                ));
            }
            1
        }
        _ => config.segments.unwrap_or(DEFAULT_SEGMENTS),
    };
    if segments == 0 {
        return Err(Error::config("<sampler>", "K must be positive"));
    }
    let n = config.n.unwrap_or(1);
    let m = config.m.unwrap_or(1);
    if n == 0 || m == 0 {
        return Err(Error::config("<sampler>", "n and m must be positive"));
    }
    let ula_tail = config.ula_tail.unwrap_or(match config.sampler {
        SamplerKind::RsdmcV2 => DEFAULT_TAIL,
        _ => 0,
    });
    let default_iters = DEFAULT_SEGMENTS * DEFAULT_ITERS / segments;
    let iters = match (config.iters, config.budget) {
        (Some(r), _) => r,
        (None, Some(b)) => iters_for_budget(b, segments, n * m, ula_tail),
        (None, None) => default_iters,
    };
    if iters == 0 {
        return Err(Error::config("<sampler>", "R must be positive"));
    }
    if ula_tail > segments * iters {
        return Err(Error::config(
            "<sampler>",
            format!(
                "ula_tail {ula_tail} exceeds the {} outer iterations",
                segments * iters
            ),
        ));
    }
    let horizon = positive("horizon", config.horizon.unwrap_or(DEFAULT_HORIZON))?;
    let eta = positive(
        "eta",
        config.eta.unwrap_or(horizon / (segments * iters) as f64),
    )?;
    let tau = positive("tau", config.tau.unwrap_or(DEFAULT_TAU))?;
    let tail_step = positive("tail_step", config.tail_step.unwrap_or(tau))?;
    Ok(Plan::Diffusion {
        sampler: config.sampler,
        params: ScheduleParams {
            segment_len: iters as f64 * eta,
            segments,
            eta,
            iters,
            tau: TauRule::Fixed(tau),
            samples: SampleRule::Fixed(n),
            inner_iters: IterRule::Fixed(m),
            tolerance: None,
            log_delta: None,
            variant: config.variant.unwrap_or(DriftVariant::Factor2),
            ula_tail,
            ula_tail_step: tail_step,
        },
    })
}

/// Largest `R` whose run costs at most `budget` gradients per particle.
fn iters_for_budget(budget: u64, segments: usize, nm: u64, tail: usize) -> usize {
    let per_round: u64 = (0..segments as u32)
        .map(|k| nm.saturating_pow(k + 1))
        .fold(0u64, |a, b| a.saturating_add(b));
    // Tail steps sit in the last segment and cost 1 instead of n·m.
    let refund = (tail as u64).saturating_mul(nm.saturating_sub(1));
    ((budget.saturating_add(refund)) / per_round.max(1)).max(1) as usize
}
