//! End-to-end samplers: ULA, single-segment DMC and the segmented recursive
//! sampler (with optional Langevin tail).
//!
//! Particles are independent. Particle `i` draws all of its randomness from
//! `RngStream::for_particle(seed, i)` and counts gradients on its own shard,
//! so results are bit-identical for any number of worker threads.

use rayon::prelude::*;
use serde_json::json;

use crate::counter::GradientCounter;
use crate::error::{Error, Result};
use crate::ou::reverse_exp_step;
use crate::particles::{ParticleSet, RunMeta};
use crate::rng::RngStream;
use crate::rse::{deep_score_v2, estimate_score, DIVERGENCE_BOUND};
use crate::schedule::{validate, Constraint, Plan, SamplerKind, ScheduleParams, UlaParams};
use crate::target::TargetDistribution;

/// Where the reverse sampler gets its scores.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ScoreSource {
    /// Recursive estimation from the gradient oracle.
    #[default]
    Recursive,
    /// The target's closed-form diffused score (no gradient calls). For tests
    /// and reference runs only.
    Exact,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
    /// Per-particle gradient counts at which to snapshot the particles,
    /// ascending.
    pub checkpoints: Vec<u64>,
    pub score: ScoreSource,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub particles: ParticleSet,
    /// One set per requested checkpoint.
    pub snapshots: Vec<ParticleSet>,
}

/// `n` i.i.d. `N(0, I_d)` draws, particle `i` from its own stream.
pub fn init_particles(n: usize, d: usize, seed: u64) -> ParticleSet {
    let mut flat = Vec::with_capacity(n * d);
    for i in 0..n {
        let mut rng = RngStream::for_particle(seed, i);
        flat.extend(rng.normal_vec(d));
    }
    ParticleSet::from_flat(d, flat).expect("positive dimension")
}

struct Trajectory<'a> {
    checkpoints: &'a [u64],
    next: usize,
    snaps: Vec<Vec<f64>>,
}

impl<'a> Trajectory<'a> {
    fn new(checkpoints: &'a [u64]) -> Self {
        Self {
            checkpoints,
            next: 0,
            snaps: Vec::with_capacity(checkpoints.len()),
        }
    }

    fn observe(&mut self, x: &[f64], used: u64) {
        while self.next < self.checkpoints.len() && self.checkpoints[self.next] <= used {
            self.snaps.push(x.to_vec());
            self.next += 1;
        }
    }

    fn finish(self) -> Result<Vec<Vec<f64>>> {
        if self.next < self.checkpoints.len() {
            return Err(Error::invalid(format!(
                "checkpoint {} lies beyond the run's gradient budget",
                self.checkpoints[self.next]
            )));
        }
        Ok(self.snaps)
    }
}

struct ParticleRun {
    x: Vec<f64>,
    snaps: Vec<Vec<f64>>,
    counter: GradientCounter,
}

fn outer_guard(x: &[f64], particle: usize, step: usize) -> Result<()> {
    if x.iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_BOUND)
    {
        Ok(())
    } else {
        Err(Error::ParticleDivergence { particle, step })
    }
}

fn ula_particle<T: TargetDistribution + ?Sized>(
    target: &T,
    p: &UlaParams,
    seed: u64,
    i: usize,
    checkpoints: &[u64],
) -> Result<ParticleRun> {
    let mut rng = RngStream::for_particle(seed, i);
    let mut counter = GradientCounter::new();
    let mut x = rng.normal_vec(target.dim());
    let mut traj = Trajectory::new(checkpoints);
    traj.observe(&x, 0);
    let sd = (2.0 * p.step).sqrt();
    for step in 0..p.steps as usize {
        let g = target.grad_log_density(&x, &mut counter)?;
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi += p.step * gi + sd * rng.normal();
        }
        outer_guard(&x, i, step)?;
        traj.observe(&x, counter.total());
    }
    Ok(ParticleRun {
        x,
        snaps: traj.finish()?,
        counter,
    })
}

fn reverse_particle<T: TargetDistribution + ?Sized>(
    target: &T,
    params: &ScheduleParams,
    source: ScoreSource,
    seed: u64,
    i: usize,
    checkpoints: &[u64],
) -> Result<ParticleRun> {
    let mut rng = RngStream::for_particle(seed, i);
    let mut counter = GradientCounter::new();
    let mut x = rng.normal_vec(target.dim());
    let mut traj = Trajectory::new(checkpoints);
    traj.observe(&x, 0);
    let total = params.total_outer();
    let tail_start = total.saturating_sub(params.ula_tail);
    let tail_sd = (2.0 * params.ula_tail_step).sqrt();
    let mut it = 0usize;
    for k in (0..params.segments).rev() {
        for r in 0..params.iters {
            if it >= tail_start {
                let g = deep_score_v2(&x, target, &mut counter)?;
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi += params.ula_tail_step * gi + tail_sd * rng.normal();
                }
            } else {
                let v = match source {
                    ScoreSource::Recursive => {
                        estimate_score(k as i64, r, &x, params, target, &mut rng, &mut counter)?
                            .value
                    }
                    ScoreSource::Exact => {
                        let t = k as f64 * params.segment_len + params.gap(r);
                        target.diffused_score(t, &x).ok_or_else(|| {
                            Error::invalid("target has no closed-form diffused score")
                        })??
                    }
                };
                x = reverse_exp_step(&x, &v, params.step_size(r), params.variant, &mut rng)?;
            }
            outer_guard(&x, i, it)?;
            it += 1;
            traj.observe(&x, counter.total());
        }
    }
    Ok(ParticleRun {
        x,
        snaps: traj.finish()?,
        counter,
    })
}

fn map_particles<F>(n: usize, workers: Option<usize>, f: F) -> Result<Vec<ParticleRun>>
where
    F: Fn(usize) -> Result<ParticleRun> + Sync + Send,
{
    match workers {
        Some(1) => (0..n).map(f).collect(),
        Some(w) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(|| (0..n).into_par_iter().map(f).collect())
        }
        None => (0..n).into_par_iter().map(f).collect(),
    }
}

fn assemble(
    runs: Vec<ParticleRun>,
    d: usize,
    n_snaps: usize,
    meta: RunMeta,
    counter: &mut GradientCounter,
) -> RunOutput {
    let n = runs.len();
    let mut flat = Vec::with_capacity(n * d);
    let mut snaps: Vec<Vec<f64>> = vec![Vec::with_capacity(n * d); n_snaps];
    let mut shard = GradientCounter::new();
    for run in runs {
        flat.extend_from_slice(&run.x);
        for (dst, s) in snaps.iter_mut().zip(run.snaps) {
            dst.extend(s);
        }
        shard.merge(run.counter);
    }
    counter.merge(shard);
    let mut meta = meta;
    meta.grad_total = shard.total();
    meta.grad_per_particle = if n == 0 {
        0.0
    } else {
        shard.total() as f64 / n as f64
    };
    meta.particles = n;
    meta.dim = d;
    let mut particles = ParticleSet::from_flat(d, flat).expect("consistent rows");
    particles.meta = meta.clone();
    let snapshots = snaps
        .into_iter()
        .map(|s| {
            let mut set = ParticleSet::from_flat(d, s).expect("consistent rows");
            set.meta = RunMeta {
                grad_total: 0,
                grad_per_particle: 0.0,
                ..meta.clone()
            };
            set
        })
        .collect();
    RunOutput {
        particles,
        snapshots,
    }
}

/// Runs a resolved plan. Every gradient call is merged into `counter`.
pub fn run_plan<T: TargetDistribution + ?Sized>(
    target: &T,
    plan: &Plan,
    n_particles: usize,
    seed: u64,
    opts: &RunOptions,
    counter: &mut GradientCounter,
) -> Result<RunOutput> {
    if opts.checkpoints.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("checkpoints must be sorted ascending"));
    }
    if let (Some(budget), Some(&last)) = (plan.grad_cost_per_particle(), opts.checkpoints.last()) {
        if last > budget {
            return Err(Error::invalid(format!(
                "checkpoint {last} lies beyond the gradient budget {budget}"
            )));
        }
    }
    let d = target.dim();
    let mut meta = RunMeta {
        sampler: plan.sampler().to_string(),
        seed,
        budget: plan.grad_cost_per_particle(),
        ..RunMeta::default()
    };
    let cps = opts.checkpoints.as_slice();
    let runs = match plan {
        Plan::Ula(p) => {
            if !(p.step > 0.0) {
                return Err(Error::invalid(format!(
                    "ULA step must be positive, got {}",
                    p.step
                )));
            }
            meta.schedule = json!({ "plan": plan });
            map_particles(n_particles, opts.workers, |i| {
                ula_particle(target, p, seed, i, cps)
            })?
        }
        Plan::Diffusion { params, .. } => {
            let violations = validate(params, target.smoothness());
            if let Some(v) = violations
                .iter()
                .find(|v| v.constraint == Constraint::Degenerate)
            {
                return Err(Error::ScheduleViolation(v.message.clone()));
            }
            if params.ula_tail > 0 && !(params.ula_tail_step > 0.0) {
                return Err(Error::ScheduleViolation(
                    "Langevin tail needs a positive step".into(),
                ));
            }
            meta.schedule = json!({ "plan": plan, "violations": violations });
            map_particles(n_particles, opts.workers, |i| {
                reverse_particle(target, params, opts.score, seed, i, cps)
            })?
        }
    };
    Ok(assemble(runs, d, cps.len(), meta, counter))
}

pub fn run_ula<T: TargetDistribution + ?Sized>(
    target: &T,
    n_particles: usize,
    steps: u64,
    step: f64,
    seed: u64,
    counter: &mut GradientCounter,
) -> Result<ParticleSet> {
    let plan = Plan::Ula(UlaParams { step, steps });
    Ok(run_plan(
        target,
        &plan,
        n_particles,
        seed,
        &RunOptions::default(),
        counter,
    )?
    .particles)
}

/// Segmented reverse sampler; a nonzero `ula_tail` gives the v2 variant.
pub fn run_rsdmc<T: TargetDistribution + ?Sized>(
    target: &T,
    params: &ScheduleParams,
    n_particles: usize,
    seed: u64,
    counter: &mut GradientCounter,
) -> Result<ParticleSet> {
    let sampler = if params.ula_tail > 0 {
        SamplerKind::RsdmcV2
    } else {
        SamplerKind::RsdmcV1
    };
    let plan = Plan::Diffusion {
        sampler,
        params: params.clone(),
    };
    Ok(run_plan(
        target,
        &plan,
        n_particles,
        seed,
        &RunOptions::default(),
        counter,
    )?
    .particles)
}

/// Vanilla DMC: the same reverse sampler with the whole horizon as one segment.
pub fn run_dmc<T: TargetDistribution + ?Sized>(
    target: &T,
    params: &ScheduleParams,
    n_particles: usize,
    seed: u64,
    counter: &mut GradientCounter,
) -> Result<ParticleSet> {
    let plan = Plan::Diffusion {
        sampler: SamplerKind::Dmc,
        params: params.collapsed(),
    };
    Ok(run_plan(
        target,
        &plan,
        n_particles,
        seed,
        &RunOptions::default(),
        counter,
    )?
    .particles)
}
