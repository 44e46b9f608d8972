//! Recursive-score diffusion Monte Carlo for sampling unnormalized densities.
//!
//! The crate provides
//! - Gaussian-mixture targets with exact diffused scores ([`target`]),
//! - Ornstein-Uhlenbeck kernels and the reverse exponential step ([`ou`]),
//! - step-size, segment and sample-count schedules ([`schedule`]),
//! - the recursive score estimator ([`rse`]),
//! - ULA, DMC and segmented samplers ([`samplers`]),
//! - MMD and per-mode metrics ([`metrics`]),
//! - budget sweeps with on-disk reports ([`experiment`]).
//!
//! All randomness flows from a `u64` seed through per-particle streams, so
//! every result is reproducible regardless of thread count.

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod counter;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod ou;
pub mod particles;
pub mod rng;
pub mod rse;
pub mod samplers;
pub mod schedule;
pub mod target;

pub use counter::GradientCounter;
pub use error::{Error, Result};
pub use experiment::{
    run_experiment, snapshot_trajectory, ExperimentConfig, ExperimentOptions, ExperimentReport,
};
pub use metrics::{median_heuristic, mmd_rbf, mode_stats, MmdReport, ModeStats};
pub use ou::{DriftVariant, TimeIndex};
pub use particles::{dump_particles, read_particles, ParticleSet, RunMeta};
pub use rng::RngStream;
pub use rse::{estimate_score, ScoreEstimate, DIVERGENCE_BOUND};
pub use samplers::{
    init_particles, run_dmc, run_plan, run_rsdmc, run_ula, RunOptions, ScoreSource,
};
pub use schedule::{
    practical_schedule, theoretical_schedule, validate, Plan, SamplerConfig, SamplerKind,
    ScheduleParams, Violation,
};
pub use target::{GaussianMixture, TargetDistribution};
