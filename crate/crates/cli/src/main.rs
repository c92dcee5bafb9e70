#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use gateroute::calibration::{build_profile, calibrate, MeasurementSet};
use gateroute::fluid::{integrate, FluidModel, FluidState};
use gateroute::harness::{fluid_rows, replication_seed, run_experiment, ExperimentKind, ExperimentSpec};
use gateroute::model::{prop1_condition, PricingScheme};
use gateroute::planner::{plan_with_scheme, sweep_frontier, FrontierAxis};
use gateroute::policy::PolicyKind;
use gateroute::sim::{self, default_horizon, SimConfig, DEFAULT_WARMUP};
use gateroute::{FluidPlan, Instance, SliSpec};
use rayon::prelude::*;

/// Environment variable holding the worker-thread count.
const THREADS_VAR: &str = "GATEROUTE_THREADS";

#[derive(Parser)]
#[command(name = "gateroute", version, about = "Fluid planning and simulation of prefill/decode scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a hardware profile from iteration-time measurements.
    Calibrate(CalibrateArgs),
    /// Solve the fluid LP for an instance.
    Plan(PlanArgs),
    /// Sweep one SLI bound and record the optimal revenue, or run a frontier spec.
    Frontier(FrontierArgs),
    /// Integrate the fluid ODE under a policy.
    Fluid(FluidArgs),
    /// Run the stochastic simulator.
    Simulate(SimulateArgs),
    /// Run an experiment spec.
    Sweep(SweepArgs),
    /// `sweep` restricted to convergence specs.
    Convergence(SweepArgs),
    /// `sweep` restricted to baseline specs.
    Baselines(SweepArgs),
    /// `sweep` restricted to hardware-sweep specs.
    Hardware(SweepArgs),
    /// `sweep` restricted to pricing-grid specs.
    Pricing(SweepArgs),
    /// `sweep` restricted to fluid-trace specs.
    FluidTrace(SweepArgs),
}

#[derive(Args)]
struct CalibrateArgs {
    /// CSV with header `chunk_size,iter_time_s`.
    #[arg(long)]
    mixed: PathBuf,
    /// CSV with header `tokens_per_s`.
    #[arg(long)]
    solo: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    b0: f64,
    /// Batch cap `B` written into the profile.
    #[arg(long = "batch-cap", default_value_t = 16)]
    batch_cap: usize,
    /// Chunk size `C` written into the profile.
    #[arg(long, default_value_t = 256.0)]
    chunk: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InstanceArgs {
    /// Instance JSON.
    #[arg(long)]
    config: PathBuf,
    /// SLI JSON.
    #[arg(long)]
    sli: Option<PathBuf>,
    /// Overrides the instance pricing scheme.
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<PricingScheme>,
}

impl InstanceArgs {
    fn load(&self) -> Result<(Instance, SliSpec, PricingScheme)> {
        let inst = Instance::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        let sli = match &self.sli {
            Some(p) => read_json(p)?,
            None => SliSpec::none(),
        };
        let scheme = self.scheme.unwrap_or(inst.pricing.scheme);
        Ok((inst, sli, scheme))
    }
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long)]
    out: PathBuf,
}

/// Either a direct sweep (`--config --axis --grid`, CSV out) or a frontier
/// experiment spec (`--spec`, directory out).
#[derive(Args)]
struct FrontierArgs {
    #[arg(long, conflicts_with_all = ["config", "axis", "grid"], required_unless_present = "config")]
    spec: Option<PathBuf>,
    #[arg(long, requires_all = ["axis", "grid"])]
    config: Option<PathBuf>,
    #[arg(long)]
    sli: Option<PathBuf>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<PricingScheme>,
    #[arg(long)]
    axis: Option<FrontierAxis>,
    /// `start:stop:step`, inclusive of `stop`.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<Grid>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FluidArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, default_value = "gg-sp")]
    policy: PolicyKind,
    #[arg(short = 'T', long, default_value_t = 2000.0)]
    horizon: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    /// Write every k-th step.
    #[arg(long, default_value_t = 100)]
    every: usize,
    /// Start at the plan instead of the empty state.
    #[arg(long)]
    from_plan: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Plan JSON; solved from the instance when absent.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long, default_value = "gg-sp")]
    policy: PolicyKind,
    #[arg(short = 'n', long, default_value_t = 100)]
    n: usize,
    /// Simulated seconds; defaults to a window of 50 slowest decodes.
    #[arg(short = 'T', long)]
    horizon: Option<f64>,
    /// Number of replications.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    root_seed: u64,
    #[arg(long, default_value_t = DEFAULT_WARMUP)]
    warmup: f64,
    /// Re-check flow balance after every event (slow).
    #[arg(long)]
    audit: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone)]
struct Grid(Vec<f64>);

fn parse_grid(s: &str) -> Result<Grid, String> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(format!("expected start:stop:step, got `{s}`"));
    };
    if !(step > 0.0) || !(stop >= start) {
        return Err(format!("need step > 0 and stop >= start, got `{s}`"));
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    Ok(Grid((0..count).map(|k| start + step * k as f64).collect()))
}

fn parse_scheme(s: &str) -> Result<PricingScheme, String> {
    match s {
        "bundled" => Ok(PricingScheme::Bundled),
        "separate" => Ok(PricingScheme::Separate),
        _ => Err(format!("unknown pricing scheme `{s}` (bundled, separate)")),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let set = MeasurementSet::<f64>::load(&a.mixed, &a.solo)?;
    let fit = calibrate(&set)?;
    log::info!(
        "alpha={} beta={} gamma={} R^2={} ({} mixed, {} solo samples)",
        fit.alpha,
        fit.beta,
        fit.gamma,
        fit.r_squared,
        fit.n_mixed,
        fit.n_solo
    );
    let profile = build_profile(&fit, a.batch_cap, a.chunk, a.b0);
    profile.validate()?;
    write_json(&a.out, &profile)
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let (inst, sli, scheme) = a.instance.load()?;
    if !prop1_condition(&inst) {
        log::warn!("solo decode is slower than the mixed-batch bound; decode buffers may be optimal");
    }
    let p = plan_with_scheme(&inst, &sli, scheme).context("solving fluid LP")?;
    log::info!("objective {} per GPU-second, x = {:?}", p.objective, p.x);
    write_json(&a.out, &p)
}

fn cmd_frontier(a: &FrontierArgs) -> Result<()> {
    if let Some(spec) = &a.spec {
        let sweep = SweepArgs {
            spec: spec.clone(),
            out: a.out.clone(),
        };
        return cmd_sweep(&sweep, Some(ExperimentKind::Frontier));
    }
    let (Some(config), Some(axis), Some(grid)) = (&a.config, a.axis, &a.grid) else {
        bail!("frontier needs either --spec or --config, --axis and --grid");
    };
    let instance = InstanceArgs {
        config: config.clone(),
        sli: a.sli.clone(),
        scheme: a.scheme,
    };
    let (inst, sli, scheme) = instance.load()?;
    let points = sweep_frontier(&inst, axis, &grid.0, scheme, &sli).context("frontier sweep")?;
    let mut w = csv_writer(&a.out)?;
    w.write_record(["eta", "objective", "feasible", "shadow_price"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in points {
        w.write_record([p.eta.to_string(), opt(p.objective), p.feasible.to_string(), opt(p.shadow_price)])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_fluid(a: &FluidArgs) -> Result<()> {
    ensure!(a.every > 0, "--every must be positive");
    let inst = Instance::load(&a.config)?;
    let p: FluidPlan = read_json(&a.plan)?;
    let model = FluidModel::new(&inst, &p, a.policy)?;
    let start = if a.from_plan {
        FluidState::at_plan(&p, &inst, a.policy)
    } else {
        FluidState::empty(inst.num_classes())
    };
    let traj = integrate(&model, &start, a.horizon, a.dt)?;
    log::info!(
        "terminal |x - x*| = {:e}, terminal q_d = {:e}, drift checks {} ({} violations)",
        traj.terminal_x_error,
        traj.terminal_q_d,
        traj.drift_checks,
        traj.drift_violations
    );
    let mut w = csv_writer(&a.out)?;
    for row in fluid_rows(&model, &traj.samples, a.every) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    ensure!(a.seeds > 0, "--seeds must be positive");
    let inst = Instance::load(&a.config)?;
    let p: Option<FluidPlan> = match &a.plan {
        Some(path) => Some(read_json(path)?),
        None if a.policy.needs_plan() => Some(plan_with_scheme(&inst, &SliSpec::none(), inst.pricing.scheme)?),
        None => None,
    };
    let horizon = a.horizon.unwrap_or_else(|| default_horizon(&inst, a.warmup, 50.0));
    log::info!("simulating {} on n = {} for {horizon} s, {} seeds", a.policy, a.n, a.seeds);
    let records = (0..a.seeds)
        .into_par_iter()
        .map(|s| {
            let cfg = SimConfig {
                warmup: a.warmup,
                audit: a.audit,
                ..SimConfig::new(a.n, horizon, replication_seed(a.root_seed, s))
            };
            sim::run(&inst, p.as_ref(), a.policy, &cfg).with_context(|| format!("seed {s}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv_writer(&a.out)?;
    w.write_record([
        "policy",
        "n",
        "seed",
        "rev_per_gpu",
        "class",
        "x_occ",
        "ym_occ",
        "ys_occ",
        "qp_scaled",
        "qd_scaled",
        "tpot_avg",
    ])?;
    for (s, m) in records.iter().enumerate() {
        for (i, c) in m.classes.iter().enumerate() {
            w.write_record([
                a.policy.to_string(),
                a.n.to_string(),
                s.to_string(),
                m.rev_per_gpu.to_string(),
                i.to_string(),
                c.x_occ.to_string(),
                c.ym_occ.to_string(),
                c.ys_occ.to_string(),
                c.qp_scaled.to_string(),
                c.qd_scaled.to_string(),
                m.tpot_avg.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(a: &SweepArgs, want: Option<ExperimentKind>) -> Result<()> {
    let spec = ExperimentSpec::load(&a.spec)?;
    if let Some(kind) = want {
        if spec.kind != kind {
            bail!("{} is a `{}` spec, not `{}`", a.spec.display(), spec.kind.name(), kind.name());
        }
    }
    spec.validate()?;
    let base = a.spec.parent().unwrap_or(Path::new("."));
    let out = run_experiment(&spec, base).with_context(|| format!("experiment `{}`", spec.id()))?;
    for path in out.write(&a.out)? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_VAR}={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_threads()?;
    let cli = Cli::parse();
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Frontier(a) => cmd_frontier(a),
        Command::Fluid(a) => cmd_fluid(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a, None),
        Command::Convergence(a) => cmd_sweep(a, Some(ExperimentKind::Convergence)),
        Command::Baselines(a) => cmd_sweep(a, Some(ExperimentKind::Baselines)),
        Command::Hardware(a) => cmd_sweep(a, Some(ExperimentKind::HardwareSweep)),
        Command::Pricing(a) => cmd_sweep(a, Some(ExperimentKind::PricingGrid)),
        Command::FluidTrace(a) => cmd_sweep(a, Some(ExperimentKind::FluidTrace)),
    }
}
