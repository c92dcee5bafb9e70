//! Experiment runner: JSON specs in, long-format CSV tables and manifests out.
//!
//! Every grid point is an independent planner or simulator call and runs on
//! the rayon pool; rows are collected in grid order so output is
//! byte-identical across runs and thread counts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fluid::{integrate, weighted_decode_work, FluidError, FluidModel, FluidState};
use crate::model::{HardwareProfile, Instance, ModelError};
use crate::planner::{plan, sweep_frontier, FluidPlan, FrontierAxis, PlanError, SliSpec};
use crate::policy::PolicyKind;
use crate::sim::{self, default_horizon, MetricsRecord, SimConfig, SimError, DEFAULT_WARMUP};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error("{context}: {source}")]
    Plan { context: String, source: PlanError },
    #[error("{context}: {source}")]
    Sim { context: String, source: SimError },
    #[error("{context}: {source}")]
    Fluid { context: String, source: FluidError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Convergence,
    Baselines,
    Frontier,
    HardwareSweep,
    PricingGrid,
    FluidTrace,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Convergence => "convergence",
            Self::Baselines => "baselines",
            Self::Frontier => "frontier",
            Self::HardwareSweep => "hardware-sweep",
            Self::PricingGrid => "pricing-grid",
            Self::FluidTrace => "fluid-trace",
        }
    }
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_warmup() -> f64 {
    DEFAULT_WARMUP
}
fn default_ratio_points() -> usize {
    50
}
fn default_fluid_horizon() -> f64 {
    2000.0
}
fn default_dt() -> f64 {
    0.01
}
fn default_every() -> usize {
    100
}

/// One experiment. Grids that do not apply to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Output file stem; defaults to the kind name.
    #[serde(default)]
    pub id: Option<String>,
    pub kind: ExperimentKind,
    /// Instance JSON, relative to the spec file.
    pub instance: PathBuf,
    #[serde(default)]
    pub sli: SliSpec<f64>,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub policies: Vec<PolicyKind>,
    /// Simulated seconds; auto-scaled from the slowest decode when absent.
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup: f64,
    #[serde(default)]
    pub axis: Option<FrontierAxis>,
    #[serde(default)]
    pub eta: Vec<f64>,
    /// Frontier points re-checked by simulation.
    #[serde(default)]
    pub simulate_eta: Vec<f64>,
    #[serde(default)]
    pub batch_caps: Vec<usize>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub gammas: Vec<f64>,
    /// Also simulate every hardware grid point at `n[0]`.
    #[serde(default)]
    pub simulate: bool,
    /// Price totals `c_p + c_d`.
    #[serde(default)]
    pub price_totals: Vec<f64>,
    #[serde(default = "default_ratio_points")]
    pub ratio_points: usize,
    #[serde(default = "default_fluid_horizon")]
    pub fluid_horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Keep every `every`-th fluid sample.
    #[serde(default = "default_every")]
    pub every: usize,
}

impl ExperimentSpec {
    pub fn new(kind: ExperimentKind, instance: impl Into<PathBuf>) -> Self {
        Self {
            id: None,
            kind,
            instance: instance.into(),
            sli: SliSpec::none(),
            root_seed: 0,
            seeds: default_seeds(),
            n: Vec::new(),
            policies: Vec::new(),
            horizon: None,
            warmup: DEFAULT_WARMUP,
            axis: None,
            eta: Vec::new(),
            simulate_eta: Vec::new(),
            batch_caps: Vec::new(),
            alphas: Vec::new(),
            betas: Vec::new(),
            gammas: Vec::new(),
            simulate: false,
            price_totals: Vec::new(),
            ratio_points: default_ratio_points(),
            fluid_horizon: default_fluid_horizon(),
            dt: default_dt(),
            every: default_every(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.into(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json {
            path: path.into(),
            source,
        })
    }

    pub fn id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.name().to_string())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("seeds must be distinct");
        }
        let simulates = matches!(self.kind, ExperimentKind::Convergence | ExperimentKind::Baselines)
            || (self.kind == ExperimentKind::Frontier && !self.simulate_eta.is_empty())
            || (self.kind == ExperimentKind::HardwareSweep && self.simulate);
        if simulates && (self.n.is_empty() || self.seeds.is_empty()) {
            return bad("simulation needs nonempty `n` and `seeds`");
        }
        if self.n.contains(&0) {
            return bad("`n` entries must be positive");
        }
        match self.kind {
            ExperimentKind::Frontier if self.axis.is_none() || self.eta.is_empty() => {
                bad("frontier needs `axis` and a nonempty `eta` grid")
            }
            ExperimentKind::HardwareSweep
                if self.batch_caps.is_empty()
                    && self.alphas.is_empty()
                    && self.betas.is_empty()
                    && self.gammas.is_empty() =>
            {
                bad("hardware sweep needs at least one of `batch_caps`, `alphas`, `betas`, `gammas`")
            }
            ExperimentKind::PricingGrid if self.price_totals.is_empty() || self.ratio_points == 0 => {
                bad("pricing grid needs `price_totals` and `ratio_points` >= 1")
            }
            ExperimentKind::FluidTrace if self.every == 0 => bad("`every` must be positive"),
            _ => Ok(()),
        }
    }
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub experiment: String,
    pub params: Vec<(String, String)>,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn params_string(&self) -> String {
        let mut s = String::new();
        for (i, (k, v)) in self.params.iter().enumerate() {
            if i > 0 {
                s.push(';');
            }
            let _ = write!(s, "{k}={v}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub kind: ExperimentKind,
    pub root_seed: u64,
    pub tool_version: String,
    pub instance: String,
    pub instance_sha256: String,
    pub rows: usize,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

type Params = Vec<(String, String)>;

fn params(pairs: &[(&str, String)]) -> Params {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

impl ResultTable {
    fn push(&mut self, experiment: &str, params: &Params, metric: impl Into<String>, value: f64) {
        self.rows.push(ResultRow {
            experiment: experiment.to_string(),
            params: params.clone(),
            metric: metric.into(),
            value,
        });
    }

    /// Rows with `metric` whose params contain every `(key, value)` in `filter`.
    pub fn select<'a>(&'a self, metric: &'a str, filter: &'a [(&'a str, &'a str)]) -> impl Iterator<Item = &'a ResultRow> {
        self.rows
            .iter()
            .filter(move |r| r.metric == metric && filter.iter().all(|(k, v)| r.param(k) == Some(*v)))
    }

    pub fn value(&self, metric: &str, filter: &[(&str, &str)]) -> Option<f64> {
        self.select(metric, filter).next().map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experiment", "params", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([r.experiment.as_str(), &r.params_string(), &r.metric, &r.value.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Seed handed to the simulator for replication `seed` under `root`.
pub fn replication_seed(root: u64, seed: u64) -> u64 {
    // SplitMix64 finalizer.
    let mut z = root.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn solve(inst: &Instance<f64>, sli: &SliSpec<f64>, context: impl FnOnce() -> String) -> Result<FluidPlan<f64>, HarnessError> {
    plan(inst, sli).map_err(|source| HarnessError::Plan {
        context: context(),
        source,
    })
}

fn horizon_for(spec: &ExperimentSpec, inst: &Instance<f64>) -> f64 {
    spec.horizon
        .unwrap_or_else(|| default_horizon(inst, spec.warmup, 50.0))
}

fn simulate(
    inst: &Instance<f64>,
    plan: &FluidPlan<f64>,
    policy: PolicyKind,
    n: usize,
    seed: u64,
    spec: &ExperimentSpec,
) -> Result<MetricsRecord, HarnessError> {
    let cfg = SimConfig {
        warmup: spec.warmup,
        ..SimConfig::new(n, horizon_for(spec, inst), replication_seed(spec.root_seed, seed))
    };
    sim::run(inst, Some(plan), policy, &cfg).map_err(|source| HarnessError::Sim {
        context: format!("policy={policy} n={n} seed={seed}"),
        source,
    })
}

fn push_metrics(table: &mut ResultTable, id: &str, p: &Params, m: &MetricsRecord) {
    table.push(id, p, "rev_per_gpu", m.rev_per_gpu);
    table.push(id, p, "tpot_avg", m.tpot_avg);
    for (i, c) in m.classes.iter().enumerate() {
        for (name, v) in [
            ("x_occ", c.x_occ),
            ("ym_occ", c.ym_occ),
            ("ys_occ", c.ys_occ),
            ("qp_scaled", c.qp_scaled),
            ("qd_scaled", c.qd_scaled),
        ] {
            table.push(id, p, format!("{name}_{i}"), v);
        }
    }
}

/// Sample mean and standard deviation (`n - 1` denominator).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Revenue, queues and occupancies per `(n, seed, policy)`, plus per-`n`
/// revenue mean and spread and the fluid optimum.
pub fn run_convergence(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let plan = solve(inst, &spec.sli, || "convergence plan".into())?;
    let policies = if spec.policies.is_empty() {
        vec![PolicyKind::GgSp]
    } else {
        spec.policies.clone()
    };
    let jobs: Vec<(PolicyKind, usize, u64)> = policies
        .iter()
        .flat_map(|&p| spec.n.iter().flat_map(move |&n| spec.seeds.iter().map(move |&s| (p, n, s))))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(p, n, s)| simulate(inst, &plan, p, n, s, spec))
        .collect::<Result<Vec<_>, _>>()?;
    let mut table = ResultTable::default();
    table.push(&id, &params(&[("reference", "fluid".into())]), "fluid_optimum", plan.objective);
    for (&(p, n, s), m) in jobs.iter().zip(&records) {
        let ps = params(&[("policy", p.to_string()), ("n", n.to_string()), ("seed", s.to_string())]);
        push_metrics(&mut table, &id, &ps, m);
    }
    for &p in &policies {
        for &n in &spec.n {
            let revs: Vec<f64> = jobs
                .iter()
                .zip(&records)
                .filter(|((q, k, _), _)| *q == p && *k == n)
                .map(|(_, m)| m.rev_per_gpu)
                .collect();
            let (mean, std) = mean_std(&revs);
            let ps = params(&[("policy", p.to_string()), ("n", n.to_string())]);
            table.push(&id, &ps, "rev_mean", mean);
            table.push(&id, &ps, "rev_std", std);
        }
    }
    Ok(table)
}

/// Per-seed revenue for each policy and seed-averaged revenue normalized by
/// the best policy.
pub fn run_baselines(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let plan = solve(inst, &spec.sli, || "baseline plan".into())?;
    let policies = if spec.policies.is_empty() {
        PolicyKind::BASELINES.to_vec()
    } else {
        spec.policies.clone()
    };
    let mut table = ResultTable::default();
    for &n in &spec.n {
        let jobs: Vec<(PolicyKind, u64)> = policies
            .iter()
            .flat_map(|&p| spec.seeds.iter().map(move |&s| (p, s)))
            .collect();
        let records = jobs
            .par_iter()
            .map(|&(p, s)| simulate(inst, &plan, p, n, s, spec))
            .collect::<Result<Vec<_>, _>>()?;
        for (&(p, s), m) in jobs.iter().zip(&records) {
            let ps = params(&[("policy", p.to_string()), ("n", n.to_string()), ("seed", s.to_string())]);
            table.push(&id, &ps, "rev_per_gpu", m.rev_per_gpu);
        }
        let stats: Vec<(f64, f64)> = policies
            .iter()
            .map(|&p| {
                let revs: Vec<f64> = jobs
                    .iter()
                    .zip(&records)
                    .filter(|((q, _), _)| *q == p)
                    .map(|(_, m)| m.rev_per_gpu)
                    .collect();
                mean_std(&revs)
            })
            .collect();
        let best = stats.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        for (&p, &(mean, std)) in policies.iter().zip(&stats) {
            let ps = params(&[("policy", p.to_string()), ("n", n.to_string())]);
            table.push(&id, &ps, "rev_mean", mean);
            table.push(&id, &ps, "rev_std", std);
            table.push(&id, &ps, "normalized_revenue", if best > 0.0 { mean / best } else { 0.0 });
        }
    }
    Ok(table)
}

/// Optimal revenue, feasibility and shadow price along one SLI axis, with
/// optional simulated revenue at `simulate_eta`.
pub fn run_frontier(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let axis = spec.axis.expect("validated");
    let points = sweep_frontier(inst, axis, &spec.eta, inst.pricing.scheme, &spec.sli).map_err(|source| {
        HarnessError::Plan {
            context: format!("{axis} frontier"),
            source,
        }
    })?;
    let mut table = ResultTable::default();
    for pt in &points {
        let ps = params(&[("axis", axis.to_string()), ("eta", pt.eta.to_string())]);
        table.push(&id, &ps, "feasible", f64::from(u8::from(pt.feasible)));
        if let Some(obj) = pt.objective {
            table.push(&id, &ps, "objective", obj);
        }
        if let Some(sp) = pt.shadow_price {
            table.push(&id, &ps, "shadow_price", sp);
        }
    }
    let policy = spec.policies.first().copied().unwrap_or(PolicyKind::SliAware);
    let jobs: Vec<(f64, usize, u64)> = spec
        .simulate_eta
        .iter()
        .flat_map(|&e| spec.n.iter().flat_map(move |&n| spec.seeds.iter().map(move |&s| (e, n, s))))
        .collect();
    let sims = jobs
        .par_iter()
        .map(|&(eta, n, s)| {
            let sli = axis.apply(&spec.sli, eta);
            match plan(inst, &sli) {
                Ok(p) => simulate(inst, &p, policy, n, s, spec).map(Some),
                Err(PlanError::Infeasible(_)) => Ok(None),
                Err(source) => Err(HarnessError::Plan {
                    context: format!("{axis} = {eta}"),
                    source,
                }),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (&(eta, n, s), m) in jobs.iter().zip(&sims) {
        let ps = params(&[
            ("axis", axis.to_string()),
            ("eta", eta.to_string()),
            ("policy", policy.to_string()),
            ("n", n.to_string()),
            ("seed", s.to_string()),
        ]);
        match m {
            Some(m) => push_metrics(&mut table, &id, &ps, m),
            None => table.push(&id, &ps, "feasible", 0.0),
        }
    }
    Ok(table)
}

/// Optimal revenue and planned TPOT over the Cartesian product of the
/// hardware grids; empty grids keep the instance value.
pub fn run_hardware_sweep(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let hw = &inst.hardware;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let caps = if spec.batch_caps.is_empty() {
        vec![hw.batch_cap]
    } else {
        spec.batch_caps.clone()
    };
    let (alphas, betas, gammas) = (or(&spec.alphas, hw.alpha()), or(&spec.betas, hw.beta()), or(&spec.gammas, hw.gamma()));
    let mut grid = Vec::new();
    for &b in &caps {
        for &a in &alphas {
            for &be in &betas {
                for &g in &gammas {
                    grid.push((b, a, be, g));
                }
            }
        }
    }
    let results = grid
        .par_iter()
        .map(|&(b, a, be, g)| {
            let mut variant = inst.clone();
            variant.hardware = HardwareProfile::from_affine(b, hw.chunk_size, a, be, hw.threshold, g);
            let ps = params(&[
                ("B", b.to_string()),
                ("alpha", a.to_string()),
                ("beta", be.to_string()),
                ("gamma", g.to_string()),
            ]);
            if let Err(e) = variant.validate() {
                log::warn!("skipping {}: {e}", ps.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "));
                return Ok((ps, None, None));
            }
            let p = match plan(&variant, &spec.sli) {
                Ok(p) => p,
                Err(PlanError::Infeasible(_)) => return Ok((ps, None, None)),
                Err(source) => {
                    return Err(HarnessError::Plan {
                        context: format!("B={b} alpha={a} beta={be} gamma={g}"),
                        source,
                    })
                }
            };
            let sims = if spec.simulate {
                let policy = spec.policies.first().copied().unwrap_or(PolicyKind::GgSp);
                let recs = spec
                    .seeds
                    .iter()
                    .map(|&s| simulate(&variant, &p, policy, spec.n[0], s, spec))
                    .collect::<Result<Vec<_>, _>>()?;
                Some(recs)
            } else {
                None
            };
            Ok((ps, Some((p.objective, p.tpot(&variant))), sims))
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    let mut table = ResultTable::default();
    for (ps, fluid, sims) in results {
        table.push(&id, &ps, "feasible", f64::from(u8::from(fluid.is_some())));
        if let Some((obj, tpot)) = fluid {
            table.push(&id, &ps, "objective", obj);
            table.push(&id, &ps, "tpot", tpot);
        }
        if let Some(recs) = sims {
            let revs: Vec<f64> = recs.iter().map(|m| m.rev_per_gpu).collect();
            let tpots: Vec<f64> = recs.iter().map(|m| m.tpot_avg).collect();
            table.push(&id, &ps, "sim_rev_mean", mean_std(&revs).0);
            table.push(&id, &ps, "sim_tpot_mean", mean_std(&tpots).0);
        }
    }
    Ok(table)
}

/// Optimal revenue along `c_p + c_d = k` for each total `k`, with the prefill
/// share `c_p / k` on an evenly spaced grid over `[0, 1]`, and the maximizing
/// share per `k`.
pub fn run_pricing_grid(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let m = spec.ratio_points;
    let shares: Vec<f64> = if m == 1 {
        vec![0.5]
    } else {
        (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
    };
    let mut table = ResultTable::default();
    for &k in &spec.price_totals {
        let values = shares
            .par_iter()
            .map(|&s| {
                let mut variant = inst.clone();
                variant.pricing.prefill_price = k * s;
                variant.pricing.decode_price = k * (1.0 - s);
                match plan(&variant, &spec.sli) {
                    Ok(p) => Ok(Some(p.objective)),
                    Err(PlanError::Infeasible(_)) => Ok(None),
                    Err(source) => Err(HarnessError::Plan {
                        context: format!("k={k} share={s}"),
                        source,
                    }),
                }
            })
            .collect::<Result<Vec<Option<f64>>, _>>()?;
        let mut best: Option<(usize, f64)> = None;
        for (j, (&s, &v)) in shares.iter().zip(&values).enumerate() {
            let ps = params(&[("k", k.to_string()), ("share", s.to_string())]);
            table.push(&id, &ps, "feasible", f64::from(u8::from(v.is_some())));
            if let Some(v) = v {
                table.push(&id, &ps, "objective", v);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
        }
        if let Some((j, v)) = best {
            let ps = params(&[("k", k.to_string())]);
            let s = shares[j];
            table.push(&id, &ps, "argmax_share", s);
            table.push(&id, &ps, "argmax_ratio", if s < 1.0 { s / (1.0 - s) } else { f64::INFINITY });
            table.push(&id, &ps, "max_objective", v);
        }
    }
    Ok(table)
}

/// Thinned fluid trajectory from the empty state, one row per sampled class
/// quantity, plus terminal diagnostics.
pub fn run_fluid_trace(spec: &ExperimentSpec, inst: &Instance<f64>) -> Result<ResultTable, HarnessError> {
    spec.validate()?;
    let id = spec.id();
    let plan = solve(inst, &spec.sli, || "fluid plan".into())?;
    let policy = spec.policies.first().copied().unwrap_or(PolicyKind::GgSp);
    let fluid_err = |source| HarnessError::Fluid {
        context: format!("fluid trace under {policy}"),
        source,
    };
    let model = FluidModel::new(inst, &plan, policy).map_err(fluid_err)?;
    let traj = integrate(&model, &FluidState::empty(inst.num_classes()), spec.fluid_horizon, spec.dt)
        .map_err(fluid_err)?;
    let mut table = ResultTable::default();
    for row in fluid_rows(&model, &traj.samples, spec.every) {
        let ps = params(&[("t", row.t.to_string()), ("class", row.class.to_string())]);
        for (name, v) in [
            ("q_p", row.q_p),
            ("q_d", row.q_d),
            ("x", row.x),
            ("y_m", row.y_m),
            ("y_s", row.y_s),
            ("W_d", row.w_d),
        ] {
            table.push(&id, &ps, name, v);
        }
    }
    let ps = params(&[("policy", policy.to_string())]);
    table.push(&id, &ps, "terminal_x_error", traj.terminal_x_error);
    table.push(&id, &ps, "terminal_q_d", traj.terminal_q_d);
    table.push(&id, &ps, "drift_checks", traj.drift_checks as f64);
    table.push(&id, &ps, "drift_violations", traj.drift_violations as f64);
    Ok(table)
}

/// One sampled class state of a fluid trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FluidRow {
    pub t: f64,
    pub class: usize,
    pub q_p: f64,
    pub q_d: f64,
    pub x: f64,
    pub y_m: f64,
    pub y_s: f64,
    #[serde(rename = "W_d")]
    pub w_d: f64,
}

/// Every `every`-th sample plus the last one, flattened per class.
pub fn fluid_rows(model: &FluidModel<f64>, samples: &[FluidState<f64>], every: usize) -> Vec<FluidRow> {
    let last = samples.len().saturating_sub(1);
    samples
        .iter()
        .enumerate()
        .filter(|(k, _)| k % every.max(1) == 0 || *k == last)
        .flat_map(|(_, s)| {
            let w = weighted_decode_work(s, model.mixed_rates());
            (0..model.num_classes()).map(move |i| FluidRow {
                t: s.t,
                class: i,
                q_p: s.q_p[i],
                q_d: s.q_d(i),
                x: s.x[i],
                y_m: model.y_mixed(s, i),
                y_s: model.y_solo(s, i),
                w_d: w,
            })
        })
        .collect()
}

/// Result table and manifest of one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub table: ResultTable,
    pub manifest: Manifest,
}

/// Loads the instance named by `spec` (relative to `base_dir`) and runs it.
pub fn run_experiment(spec: &ExperimentSpec, base_dir: &Path) -> Result<ExperimentOutput, HarnessError> {
    let path = base_dir.join(&spec.instance);
    let bytes = fs::read(&path).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    let text = String::from_utf8_lossy(&bytes);
    let inst = Instance::from_json(&text)?;
    let table = match spec.kind {
        ExperimentKind::Convergence => run_convergence(spec, &inst)?,
        ExperimentKind::Baselines => run_baselines(spec, &inst)?,
        ExperimentKind::Frontier => run_frontier(spec, &inst)?,
        ExperimentKind::HardwareSweep => run_hardware_sweep(spec, &inst)?,
        ExperimentKind::PricingGrid => run_pricing_grid(spec, &inst)?,
        ExperimentKind::FluidTrace => run_fluid_trace(spec, &inst)?,
    };
    let id = spec.id();
    let manifest = Manifest {
        experiment: id.clone(),
        kind: spec.kind,
        root_seed: spec.root_seed,
        tool_version: TOOL_VERSION.to_string(),
        instance: spec.instance.display().to_string(),
        instance_sha256: sha256_hex(&bytes),
        rows: table.rows.len(),
        outputs: vec![format!("{id}.csv"), format!("{id}.manifest.json")],
    };
    Ok(ExperimentOutput { table, manifest })
}

impl ExperimentOutput {
    /// Writes `<id>.csv` and `<id>.manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let csv_path = dir.join(&self.manifest.outputs[0]);
        fs::write(&csv_path, self.table.to_csv()?).map_err(io(&csv_path))?;
        let man_path = dir.join(&self.manifest.outputs[1]);
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&man_path, json + "\n").map_err(io(&man_path))?;
        Ok(vec![csv_path, man_path])
    }
}
