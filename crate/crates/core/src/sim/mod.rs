//! Discrete-event simulation of an `n`-GPU cluster.
//!
//! Arrivals are Poisson at `n * lambda_i`; prefill, decode and patience
//! clocks are exponential. A decode runs at the mixed rate while its host GPU
//! runs a prefill and at the solo rate otherwise. Each GPU carries a single
//! decode clock at the summed rate of its residents, redrawn whenever the
//! resident set or the mode changes; by memorylessness this has the law of
//! independent per-slot clocks.
//!
//! Randomness is split into four ChaCha8 streams (arrivals, services,
//! patience, routing) derived from one seed, so two policies run with the same
//! seed see the same arrival process.

mod engine;
mod slots;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{derive_rates, Instance, ModelError, PricingScheme};
use crate::planner::FluidPlan;
use crate::policy::{PolicyKind, Routing};

pub use engine::{mode_switch_resample, DecodeClock};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy {0} needs a fluid plan")]
    PlanMissing(PolicyKind),
    #[error("plan has {got} classes, instance has {want}")]
    Shape { got: usize, want: usize },
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid instance: {0}")]
    Model(#[from] ModelError),
    #[error("two runs of seed {seed} diverged")]
    NondeterminismGuard { seed: u64 },
    #[error("audit failed at t = {t}: {what}")]
    Audit { t: f64, what: String },
}

/// Fraction of the horizon excluded from averages by default.
pub const DEFAULT_WARMUP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    /// Simulated seconds.
    pub horizon: f64,
    /// Leading fraction of the horizon excluded from averages.
    pub warmup: f64,
    pub seed: u64,
    /// Re-checks flow balance and slot limits after every event.
    #[serde(default)]
    pub audit: bool,
}

impl SimConfig {
    pub fn new(n: usize, horizon: f64, seed: u64) -> Self {
        Self {
            n,
            horizon,
            warmup: DEFAULT_WARMUP,
            seed,
            audit: false,
        }
    }

    pub fn window(&self) -> f64 {
        self.horizon * (1.0 - self.warmup)
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.n == 0 || self.n > u32::MAX as usize / 2 {
            return Err(SimError::InvalidConfig(format!("n = {} out of range", self.n)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(SimError::InvalidConfig(format!("horizon {} must be positive", self.horizon)));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(SimError::InvalidConfig(format!("warmup {} must lie in [0, 1)", self.warmup)));
        }
        Ok(())
    }
}

/// Horizon whose measurement window holds `decode_times` mean decode times of
/// the slowest class in mixed mode.
pub fn default_horizon(inst: &Instance<f64>, warmup: f64, decode_times: f64) -> f64 {
    let slowest = derive_rates(inst).mixed.iter().copied().fold(f64::INFINITY, f64::min);
    decode_times / slowest / (1.0 - warmup)
}

/// Per-class window averages, scaled by `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub x_occ: f64,
    pub ym_occ: f64,
    pub ys_occ: f64,
    pub qp_scaled: f64,
    pub qd_scaled: f64,
    /// Event counts inside the window.
    pub arrivals: u64,
    pub prefill_done: u64,
    pub decode_done: u64,
    pub prefill_abandoned: u64,
    pub decode_abandoned: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub policy: PolicyKind,
    pub n: usize,
    pub seed: u64,
    pub horizon: f64,
    pub window: f64,
    pub scheme: PricingScheme,
    /// Revenue per GPU per second inside the window.
    pub rev_per_gpu: f64,
    /// Occupancy-weighted time per output token; 0 when nothing decoded.
    pub tpot_avg: f64,
    pub classes: Vec<ClassMetrics>,
    pub mixed_gpus: usize,
    pub events: u64,
}

impl MetricsRecord {
    pub fn total_x(&self) -> f64 {
        self.classes.iter().map(|c| c.x_occ).sum()
    }

    pub fn total_qp(&self) -> f64 {
        self.classes.iter().map(|c| c.qp_scaled).sum()
    }

    pub fn total_qd(&self) -> f64 {
        self.classes.iter().map(|c| c.qd_scaled).sum()
    }

    pub fn total_decode(&self) -> f64 {
        self.classes.iter().map(|c| c.ym_occ + c.ys_occ).sum()
    }
}

/// Simulates one replication.
pub fn run(
    inst: &Instance<f64>,
    plan: Option<&FluidPlan<f64>>,
    policy: PolicyKind,
    cfg: &SimConfig,
) -> Result<MetricsRecord, SimError> {
    inst.validate()?;
    cfg.validate()?;
    if policy.needs_plan() && plan.is_none() {
        return Err(SimError::PlanMissing(policy));
    }
    if let Some(p) = plan {
        if p.num_classes() != inst.num_classes() {
            return Err(SimError::Shape {
                got: p.num_classes(),
                want: inst.num_classes(),
            });
        }
    }
    engine::Engine::new(inst, plan, policy, cfg).run()
}

/// Runs twice and fails unless both records are identical.
pub fn run_checked(
    inst: &Instance<f64>,
    plan: Option<&FluidPlan<f64>>,
    policy: PolicyKind,
    cfg: &SimConfig,
) -> Result<MetricsRecord, SimError> {
    let a = run(inst, plan, policy, cfg)?;
    let b = run(inst, plan, policy, cfg)?;
    if a != b {
        return Err(SimError::NondeterminismGuard { seed: cfg.seed });
    }
    Ok(a)
}

/// Occupancy gate: among classes with waiting prefills and a positive target,
/// the most under-occupied relative to target; ties go to the largest queue
/// excess over `queue_targets`, then to the lowest class id.
pub fn gate_decision(
    queue: &[usize],
    occupancy: &[usize],
    n: usize,
    x_target: &[f64],
    queue_targets: &[i64],
) -> Option<usize> {
    let nf = n as f64;
    let mut best: Option<(f64, i64, usize)> = None;
    for i in 0..queue.len() {
        if queue[i] == 0 || !(x_target[i] > 0.0) {
            continue;
        }
        let xi = (occupancy[i] as f64 - nf * x_target[i]) / x_target[i];
        let delta = queue[i] as i64 - queue_targets[i];
        let better = match best {
            None => true,
            Some((bx, bd, _)) => xi < bx || (xi == bx && delta > bd),
        };
        if better {
            best = Some((xi, delta, i));
        }
    }
    best.map(|(_, _, i)| i)
}

/// GPU pool of the static partition. Policies with a single decode buffer
/// keep it under `Mixed`, and dynamic GPUs are listed there too.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Mixed,
    Solo,
}

impl Pool {
    pub(crate) fn index(self) -> usize {
        match self {
            Pool::Mixed => 0,
            Pool::Solo => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteTarget {
    /// A uniformly chosen GPU with a free slot in this pool.
    Gpu(Pool),
    Buffer(Pool),
}

/// Where a finished prefill goes. `u` is a uniform draw on `[0, 1)` used by
/// the randomized routers. `None` for coupled routing, where the job keeps
/// its slot.
pub fn route_decision(
    routing: Routing,
    solo_prob: f64,
    u: f64,
    free_solo: bool,
    free_mixed: bool,
) -> Option<RouteTarget> {
    let pick = |pool: Pool, free: bool| {
        if free {
            RouteTarget::Gpu(pool)
        } else {
            RouteTarget::Buffer(pool)
        }
    };
    match routing {
        Routing::Greedy => Some(if free_solo {
            RouteTarget::Gpu(Pool::Solo)
        } else {
            pick(Pool::Mixed, free_mixed)
        }),
        Routing::Pool | Routing::PoolWeighted => Some(if u < solo_prob {
            pick(Pool::Solo, free_solo)
        } else {
            pick(Pool::Mixed, free_mixed)
        }),
        Routing::Decoupled => Some(pick(Pool::Mixed, free_mixed)),
        Routing::Coupled => None,
    }
}

/// Picks a class among `nonempty` buffers with probability proportional to
/// `weights`. `None` if every eligible weight is zero.
pub fn weighted_class_choice(weights: &[f64], nonempty: &[bool], u: f64) -> Option<usize> {
    let total: f64 = (0..weights.len()).filter(|&i| nonempty[i]).map(|i| weights[i]).sum();
    if !(total > 0.0) {
        return None;
    }
    let mut acc = 0.0;
    let mut last = None;
    for i in 0..weights.len() {
        if !nonempty[i] || !(weights[i] > 0.0) {
            continue;
        }
        acc += weights[i] / total;
        last = Some(i);
        if u < acc {
            return Some(i);
        }
    }
    last
}

/// Currency earned by the given completion counts under the instance pricing.
pub fn revenue_accrue(inst: &Instance<f64>, prefill_done: &[u64], decode_done: &[u64]) -> f64 {
    let p = &inst.pricing;
    inst.classes
        .iter()
        .enumerate()
        .map(|(i, c)| match p.scheme {
            PricingScheme::Bundled => p.request_value(c) * decode_done[i] as f64,
            PricingScheme::Separate => {
                p.prefill_price * c.prompt_len * prefill_done[i] as f64
                    + p.decode_price * c.decode_len * decode_done[i] as f64
            }
        })
        .sum()
}
