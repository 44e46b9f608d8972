use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rsdmc_core::experiment::{
    ground_truth, load_experiment_config, load_sampler_config, pooled_bandwidth,
    target_or_benchmark, write_json, write_manifest, CellStatus, ExperimentReport,
};
use rsdmc_core::metrics::{mmd_rbf, mode_stats};
use rsdmc_core::schedule::{theoretical_schedule, validate, Plan, Violation};
use rsdmc_core::{
    dump_particles, practical_schedule, run_experiment, run_plan, snapshot_trajectory,
    ExperimentOptions, GradientCounter, RunOptions, SamplerConfig, TargetDistribution,
};

const WORKERS_ENV: &str = "RSDMC_WORKERS";

#[derive(Parser)]
#[command(
    name = "rsdmc",
    version,
    about = "Diffusion-based Monte Carlo experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config's seed (or seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads. RSDMC_WORKERS takes precedence when set.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one sampler and write its particles.
    Sample(Common),
    /// Run a sampler x budget x seed sweep and write a report.
    Report(Common),
    /// Write particle clouds at the given gradient counts.
    Snapshot {
        #[command(flatten)]
        common: Common,
        /// Comma-separated per-particle gradient counts, ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        checkpoints: Vec<u64>,
    },
    /// Check a schedule against the segment, step and horizon constraints.
    ValidateSchedule(ValidateArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Sampler config whose practical schedule is checked.
    #[arg(long, conflicts_with = "theory", required_unless_present = "theory")]
    config: Option<PathBuf>,
    /// Build the theoretical schedule for `L,M,d,eps` instead.
    #[arg(long, value_delimiter = ',', value_name = "L,M,D,EPS")]
    theory: Option<Vec<f64>>,
    /// Where to write the validation JSON; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn workers(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) if !v.trim().is_empty() => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{WORKERS_ENV}={v:?} is not a thread count"))?;
            if n == 0 {
                bail!("{WORKERS_ENV} must be positive");
            }
            Ok(Some(n))
        }
        _ => match flag {
            Some(0) => bail!("--workers must be positive"),
            other => Ok(other),
        },
    }
}

fn sampler_config(common: &Common) -> Result<SamplerConfig> {
    let mut cfg = load_sampler_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    Ok(cfg)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn sample(common: &Common) -> Result<ExitCode> {
    let cfg = sampler_config(common)?;
    let target = target_or_benchmark(cfg.target.as_deref().map(Path::new))?;
    let plan = practical_schedule(&cfg)?;
    let opts = RunOptions {
        workers: workers(common.workers)?,
        ..RunOptions::default()
    };
    let mut counter = GradientCounter::new();
    let set = run_plan(
        &target,
        &plan,
        cfg.particles(),
        cfg.seed(),
        &opts,
        &mut counter,
    )?
    .particles;
    let name = cfg.sampler.as_str();
    dump_particles(&set, &common.out.join(format!("{name}.csv")))?;

    let truth = ground_truth(&target, set.len().max(2), cfg.seed());
    let bandwidth = pooled_bandwidth(std::slice::from_ref(&truth), cfg.seed())?;
    let mmd = mmd_rbf(&set, &truth, bandwidth)?;
    let modes = mode_stats(&set, &target)?;
    let summary = serde_json::json!({
        "sampler": name,
        "seed": cfg.seed(),
        "grad_per_particle": set.meta.grad_per_particle,
        "mmd": mmd,
        "modes": modes,
    });
    write_json(&common.out.join("summary.json"), &summary)?;
    write_manifest(&common.out, &command_line())?;
    println!(
        "{name}: {} particles, {} gradients/particle, MMD {:.5}, mode counts {:?}",
        set.len(),
        set.meta.grad_per_particle,
        mmd.mmd,
        modes.counts
    );
    Ok(ExitCode::SUCCESS)
}

fn print_report(report: &ExperimentReport) {
    println!("bandwidth {:.4}", report.bandwidth);
    println!(
        "{:<10} {:>7} {:>10} {:>10} {:>10}  failed",
        "sampler", "budget", "mmd_mean", "mmd_min", "mmd_max"
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
    for row in &report.summary {
        println!(
            "{:<10} {:>7} {:>10} {:>10} {:>10}  {}",
            row.sampler.as_str(),
            row.budget,
            fmt(row.mmd_mean),
            fmt(row.mmd_min),
            fmt(row.mmd_max),
            row.failed
        );
    }
    for cell in report
        .cells
        .iter()
        .filter(|c| c.status == CellStatus::Failed)
    {
        eprintln!(
            "failed: {} budget {} seed {}: {}",
            cell.sampler,
            cell.budget,
            cell.seed,
            cell.error.as_deref().unwrap_or("unknown error")
        );
    }
}

fn report(common: &Common) -> Result<ExitCode> {
    let mut cfg = load_experiment_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    let opts = ExperimentOptions {
        out: Some(common.out.clone()),
        workers: workers(common.workers)?,
    };
    let report = run_experiment(&cfg, &opts)?;
    write_manifest(&common.out, &command_line())?;
    print_report(&report);
    Ok(if report.all_succeeded() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn snapshot(common: &Common, checkpoints: &[u64]) -> Result<ExitCode> {
    let cfg = sampler_config(common)?;
    let target = target_or_benchmark(cfg.target.as_deref().map(Path::new))?;
    let snaps = snapshot_trajectory(&cfg, &target, checkpoints, workers(common.workers)?)?;
    for (cp, set) in checkpoints.iter().zip(&snaps) {
        let path = common
            .out
            .join(format!("{}_grad{cp}.csv", cfg.sampler.as_str()));
        dump_particles(set, &path)?;
    }
    write_manifest(&common.out, &command_line())?;
    println!(
        "wrote {} snapshots to {}",
        snaps.len(),
        common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn validate_schedule(args: &ValidateArgs) -> Result<ExitCode> {
    let (params, smoothness) = match (&args.config, &args.theory) {
        (Some(path), _) => {
            let cfg = load_sampler_config(path)?;
            let target = target_or_benchmark(cfg.target.as_deref().map(Path::new))?;
            match practical_schedule(&cfg)? {
                Plan::Diffusion { params, .. } => (params, target.smoothness()),
                Plan::Ula(_) => bail!("ULA has no diffusion schedule to validate"),
            }
        }
        (None, Some(v)) => {
            if v.len() != 4 {
                bail!("--theory takes four values L,M,d,eps; got {}", v.len());
            }
            let (l, m2, d, eps) = (v[0], v[1], v[2], v[3]);
            if d.fract() != 0.0 || d < 1.0 {
                bail!("dimension must be a positive integer, got {d}");
            }
            (theoretical_schedule(l, m2, d as usize, eps)?, l)
        }
        (None, None) => unreachable!("clap requires one of --config/--theory"),
    };
    let violations: Vec<Violation> = validate(&params, smoothness);
    let doc = serde_json::json!({
        "smoothness": smoothness,
        "schedule": params,
        "violations": violations,
    });
    match &args.out {
        Some(path) => write_json(path, &doc)?,
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    for v in &violations {
        eprintln!("violation: {}", v.message);
    }
    Ok(if violations.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sample(c) => sample(&c),
        Command::Report(c) => report(&c),
        Command::Snapshot {
            common,
            checkpoints,
        } => snapshot(&common, &checkpoints),
        Command::ValidateSchedule(args) => validate_schedule(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
