//! Budget sweeps over samplers and seeds, with on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counter::GradientCounter;
use crate::error::{Error, Result};
use crate::metrics::{median_heuristic, mmd_rbf, mode_stats, MmdReport, ModeStats};
use crate::particles::{dump_particles, ParticleSet};
use crate::rng::{Domain, RngStream};
use crate::samplers::{run_plan, RunOptions};
use crate::schedule::{practical_schedule, SamplerConfig, SamplerKind};
use crate::target::GaussianMixture;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_BUDGETS: [u64; 5] = [200, 400, 800, 1600, 3200];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];
pub const DEFAULT_GROUND_TRUTH: usize = 1000;

fn default_samplers() -> Vec<SamplerKind> {
    vec![SamplerKind::Ula, SamplerKind::Dmc, SamplerKind::RsdmcV2]
}
fn default_budgets() -> Vec<u64> {
    DEFAULT_BUDGETS.to_vec()
}
fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}
fn default_particles() -> usize {
    crate::schedule::DEFAULT_PARTICLES
}
fn default_ground_truth() -> usize {
    DEFAULT_GROUND_TRUTH
}

/// A sweep over samplers × budgets × seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_samplers")]
    pub samplers: Vec<SamplerKind>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<u64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_ground_truth")]
    pub ground_truth: usize,
    /// Mixture JSON file; the built-in benchmark when omitted. Relative paths
    /// are resolved against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<PathBuf>,
    /// Per-sampler settings keyed by sampler name. `budget`, `particles` and
    /// `seed` are always set by the sweep.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, SamplerConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            samplers: default_samplers(),
            budgets: default_budgets(),
            seeds: default_seeds(),
            particles: default_particles(),
            ground_truth: default_ground_truth(),
            target: None,
            overrides: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    fn check(&self, path: &str) -> Result<()> {
        let fail = |msg: &str| Err(Error::config(path, msg));
        if self.samplers.is_empty() {
            return fail("no samplers listed");
        }
        if self.budgets.is_empty() {
            return fail("no budgets listed");
        }
        if self.seeds.is_empty() {
            return fail("no seeds listed");
        }
        if self.particles == 0 || self.ground_truth == 0 {
            return fail("particle counts must be positive");
        }
        for (name, cfg) in &self.overrides {
            if cfg.sampler.as_str() != name {
                return Err(Error::config(
                    path,
                    format!("override `{name}` names sampler `{}`", cfg.sampler),
                ));
            }
        }
        Ok(())
    }

    /// The sampler config for one cell.
    pub fn cell_config(&self, sampler: SamplerKind, budget: u64, seed: u64) -> SamplerConfig {
        let mut cfg = self
            .overrides
            .get(sampler.as_str())
            .cloned()
            .unwrap_or_else(|| SamplerConfig::new(sampler));
        cfg.budget = Some(budget);
        cfg.particles = Some(self.particles);
        cfg.seed = Some(seed);
        cfg
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config_from_json(path.display().to_string(), &e))
}

fn resolve(base: &Path, rel: &Path) -> PathBuf {
    if rel.is_absolute() {
        rel.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new("")).join(rel)
    }
}

/// Reads an experiment config; a relative `target` is made relative to the
/// config file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = parse_json(path)?;
    cfg.check(&path.display().to_string())?;
    if let Some(t) = &cfg.target {
        cfg.target = Some(resolve(path, t));
    }
    Ok(cfg)
}

/// Reads a single-sampler config; a relative `target` is made relative to
/// the config file.
pub fn load_sampler_config(path: &Path) -> Result<SamplerConfig> {
    let mut cfg: SamplerConfig = parse_json(path)?;
    if let Some(t) = &cfg.target {
        cfg.target = Some(resolve(path, Path::new(t)).display().to_string());
    }
    Ok(cfg)
}

/// Reads a mixture JSON (`weights`, `means`, `variances`).
pub fn load_mixture(path: &Path) -> Result<GaussianMixture> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::config_from_json(path.display().to_string(), &e))
}

/// The mixture named by `path`, or the built-in benchmark.
pub fn target_or_benchmark(path: Option<&Path>) -> Result<GaussianMixture> {
    path.map_or_else(|| Ok(GaussianMixture::benchmark()), load_mixture)
}

/// Hex SHA-256 of the mixture's canonical JSON.
pub fn mixture_hash(target: &GaussianMixture) -> String {
    let bytes = serde_json::to_vec(target).expect("mixture serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// The ground-truth sample used for `seed`.
pub fn ground_truth(target: &GaussianMixture, n: usize, seed: u64) -> ParticleSet {
    let mut set = target.sample(n, &mut RngStream::derive(seed, Domain::GroundTruth, 0));
    set.meta.sampler = "ground-truth".into();
    set.meta.seed = seed;
    set
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One sampler × budget × seed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub sampler: SamplerKind,
    pub budget: u64,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd: Option<MmdReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModeStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_per_particle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub particles_csv: Option<String>,
    pub wall_time_s: f64,
}

/// Seed-averaged MMD for one sampler × budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sampler: SamplerKind,
    pub budget: u64,
    pub mmd_mean: Option<f64>,
    pub mmd_min: Option<f64>,
    pub mmd_max: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub benchmark_hash: String,
    pub samplers: Vec<SamplerKind>,
    pub budgets: Vec<u64>,
    pub seeds: Vec<u64>,
    pub particles: usize,
    pub ground_truth: usize,
    /// Kernel bandwidth shared by every cell: median heuristic over the
    /// pooled ground truths of all seeds.
    pub bandwidth: f64,
    pub cells: Vec<Cell>,
    pub summary: Vec<SummaryRow>,
}

impl ExperimentReport {
    pub fn all_succeeded(&self) -> bool {
        self.cells.iter().all(|c| c.status == CellStatus::Ok)
    }

    pub fn cell(&self, sampler: SamplerKind, budget: u64, seed: u64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.sampler == sampler && c.budget == budget && c.seed == seed)
    }

    pub fn summary_row(&self, sampler: SamplerKind, budget: u64) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.sampler == sampler && r.budget == budget)
    }

    /// The report with every wall-time field zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for c in &mut r.cells {
            c.wall_time_s = 0.0;
        }
        r
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOptions {
    /// Artifact directory; nothing is written when `None`.
    pub out: Option<PathBuf>,
    /// Worker threads shared by all cells; `None` uses the global pool.
    pub workers: Option<usize>,
}

fn cell_stem(sampler: SamplerKind, budget: u64, seed: u64) -> String {
    format!("{}_b{budget}_s{seed}", sampler.as_str())
}

struct CellJob {
    sampler: SamplerKind,
    budget: u64,
    seed: u64,
}

fn run_cell(
    job: &CellJob,
    config: &ExperimentConfig,
    target: &GaussianMixture,
    truth: &ParticleSet,
    bandwidth: f64,
    out: Option<&Path>,
) -> Cell {
    let start = Instant::now();
    let mut cell = Cell {
        sampler: job.sampler,
        budget: job.budget,
        seed: job.seed,
        status: CellStatus::Failed,
        error: None,
        mmd: None,
        modes: None,
        grad_per_particle: None,
        particles_csv: None,
        wall_time_s: 0.0,
    };
    let result = (|| -> Result<()> {
        let cfg = config.cell_config(job.sampler, job.budget, job.seed);
        let plan = practical_schedule(&cfg)?;
        let mut counter = GradientCounter::new();
        let mut set = run_plan(
            target,
            &plan,
            cfg.particles(),
            job.seed,
            &RunOptions::default(),
            &mut counter,
        )?
        .particles;
        set.meta.budget = Some(job.budget);
        cell.grad_per_particle = Some(set.meta.grad_per_particle);
        if let Some(dir) = out {
            let rel = format!(
                "particles/{}.csv",
                cell_stem(job.sampler, job.budget, job.seed)
            );
            dump_particles(&set, &dir.join(&rel))?;
            cell.particles_csv = Some(rel);
        }
        cell.modes = Some(mode_stats(&set, target)?);
        cell.mmd = Some(mmd_rbf(&set, truth, bandwidth)?);
        Ok(())
    })();
    match result {
        Ok(()) => cell.status = CellStatus::Ok,
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell.wall_time_s = start.elapsed().as_secs_f64();
    cell
}

fn summarize(config: &ExperimentConfig, cells: &[Cell]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for &sampler in &config.samplers {
        for &budget in &config.budgets {
            let group: Vec<&Cell> = cells
                .iter()
                .filter(|c| c.sampler == sampler && c.budget == budget)
                .collect();
            let mmds: Vec<f64> = group
                .iter()
                .filter_map(|c| c.mmd.as_ref().map(|m| m.mmd))
                .collect();
            let (mean, min, max) = if mmds.is_empty() {
                (None, None, None)
            } else {
                (
                    Some(mmds.iter().sum::<f64>() / mmds.len() as f64),
                    Some(mmds.iter().copied().fold(f64::INFINITY, f64::min)),
                    Some(mmds.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
                )
            };
            rows.push(SummaryRow {
                sampler,
                budget,
                mmd_mean: mean,
                mmd_min: min,
                mmd_max: max,
                succeeded: group.iter().filter(|c| c.status == CellStatus::Ok).count(),
                failed: group
                    .iter()
                    .filter(|c| c.status == CellStatus::Failed)
                    .count(),
            });
        }
    }
    rows
}

/// Median heuristic over the union of the given sets.
pub fn pooled_bandwidth(sets: &[ParticleSet], seed: u64) -> Result<f64> {
    let d = sets.first().map_or(1, |s| s.dim());
    for s in sets {
        crate::error::check_dim(d, s.dim())?;
    }
    let flat: Vec<f64> = sets
        .iter()
        .flat_map(|s| s.as_flat().iter().copied())
        .collect();
    let pool = ParticleSet::from_flat(d, flat)?;
    let bw = median_heuristic(&pool, &ParticleSet::empty(d), seed)?;
    if !(bw > 0.0) || !bw.is_finite() {
        return Err(Error::DegenerateBandwidth(bw));
    }
    Ok(bw)
}

/// Runs every sampler × budget × seed cell. Sampler failures are recorded
/// in their cell and do not stop the sweep.
pub fn run_experiment(
    config: &ExperimentConfig,
    opts: &ExperimentOptions,
) -> Result<ExperimentReport> {
    config.check("<experiment>")?;
    let target = target_or_benchmark(config.target.as_deref())?;
    let out = opts.out.as_deref();

    let truths: Vec<ParticleSet> = config
        .seeds
        .iter()
        .map(|&s| ground_truth(&target, config.ground_truth, s))
        .collect();
    let bandwidth = pooled_bandwidth(&truths, config.seeds[0])?;
    if let Some(dir) = out {
        for (gt, s) in truths.iter().zip(&config.seeds) {
            dump_particles(gt, &dir.join(format!("ground_truth/s{s}.csv")))?;
        }
    }

    let mut jobs = Vec::new();
    for &sampler in &config.samplers {
        for &budget in &config.budgets {
            for (si, &seed) in config.seeds.iter().enumerate() {
                jobs.push((
                    si,
                    CellJob {
                        sampler,
                        budget,
                        seed,
                    },
                ));
            }
        }
    }
    let sweep = || -> Vec<Cell> {
        jobs.par_iter()
            .map(|(si, job)| run_cell(job, config, &target, &truths[*si], bandwidth, out))
            .collect()
    };
    let cells = match opts.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(sweep),
        None => sweep(),
    };

    let report = ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        benchmark_hash: mixture_hash(&target),
        samplers: config.samplers.clone(),
        budgets: config.budgets.clone(),
        seeds: config.seeds.clone(),
        particles: config.particles,
        ground_truth: config.ground_truth,
        bandwidth,
        summary: summarize(config, &cells),
        cells,
    };
    if let Some(dir) = out {
        write_json(&dir.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub files: Vec<ManifestEntry>,
}

fn collect_files(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, acc)?;
        } else {
            acc.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except an existing manifest) and writes
/// `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str) -> Result<Manifest> {
    let manifest_path = dir.join("manifest.json");
    let mut files = Vec::new();
    collect_files(dir, &mut files)?;
    files.retain(|p| p != &manifest_path);
    files.sort();
    let mut entries = Vec::with_capacity(files.len());
    for path in files {
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rel = path.strip_prefix(dir).unwrap_or(&path);
        entries.push(ManifestEntry {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        schema_version: REPORT_SCHEMA_VERSION,
        command: command.to_string(),
        files: entries,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

/// Particle clouds at the given per-particle gradient counts.
pub fn snapshot_trajectory(
    config: &SamplerConfig,
    target: &GaussianMixture,
    checkpoints: &[u64],
    workers: Option<usize>,
) -> Result<Vec<ParticleSet>> {
    let plan = practical_schedule(config)?;
    let opts = RunOptions {
        workers,
        checkpoints: checkpoints.to_vec(),
        ..RunOptions::default()
    };
    let mut counter = GradientCounter::new();
    let out = run_plan(
        target,
        &plan,
        config.particles(),
        config.seed(),
        &opts,
        &mut counter,
    )?;
    Ok(out.snapshots)
}
