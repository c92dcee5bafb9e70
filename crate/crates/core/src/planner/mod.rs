//! Steady-state occupancy planning.
//!
//! [`build_lp`] turns an [`Instance`] plus optional service-level terms into a
//! small dense LP, [`solve_lp`] solves it and reads back a [`FluidPlan`], and
//! the remaining functions post-process plans into policy parameters.

mod elimination;
mod frontier;
mod lp;
mod params;
pub mod simplex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{derive_rates, Instance, PricingScheme};
use crate::scalar::Scalar;

pub use elimination::eliminate_decode_buffer;
pub use frontier::{sweep_frontier, FrontierAxis, FrontierPoint};
pub use lp::{build_lp, tpot_of_load, LpProblem, LpRow, RowLabel, SliSpec, SliTerm, VarRole, TPOT_TANGENTS};
pub use params::{derive_policy_params, PolicyParams};
use lp::{qd_idx, qp_idx, x_idx, ym_idx, ys_idx};
use simplex::SimplexError;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan is infeasible: {0}")]
    Infeasible(String),
    #[error("internal error: LP reported unbounded")]
    Unbounded,
    #[error("simplex did not terminate: {0}")]
    Solver(String),
    #[error("invalid SLI specification: {0}")]
    InvalidSli(String),
    #[error("TPOT penalty is not convex when gamma*tau = {gamma_tau} <= 1")]
    NonConvexPenalty { gamma_tau: f64 },
    #[error("solution violates constraints by {residual:e}")]
    Numerical { residual: f64 },
    #[error("solo decode too slow for decode-buffer elimination: gamma*tau = {gamma_tau} < (B-1)/B = {bound}")]
    ConditionViolated { gamma_tau: f64, bound: f64 },
    #[error("class {class} has zero patience but a positive decode gap")]
    ZeroPatience { class: usize },
    #[error("unsupported plan: {0}")]
    UnsupportedPlan(String),
    #[error("plan has {got} classes, instance has {want}")]
    Shape { got: usize, want: usize },
}

/// Dual value of one LP row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowDual<T: Scalar> {
    pub row: RowLabel,
    pub value: T,
}

/// Per-GPU steady-state occupancy targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidPlan<T: Scalar> {
    pub x: Vec<T>,
    #[serde(rename = "y_m")]
    pub y_mixed: Vec<T>,
    #[serde(rename = "y_s")]
    pub y_solo: Vec<T>,
    #[serde(rename = "q_p")]
    pub q_prefill: Vec<T>,
    #[serde(rename = "q_d")]
    pub q_decode: Vec<T>,
    /// Optimal value including SLI penalties, per second per GPU.
    pub objective: T,
    pub scheme: PricingScheme,
    #[serde(default)]
    pub sli: SliSpec<T>,
    #[serde(default)]
    pub duals: Vec<RowDual<T>>,
}

impl<T: Scalar> FluidPlan<T> {
    pub fn num_classes(&self) -> usize {
        self.x.len()
    }

    pub fn total_prefill(&self) -> T {
        self.x.iter().copied().sum()
    }

    /// Revenue rate of the occupancies under this plan's scheme, without penalties.
    pub fn revenue_rate(&self, inst: &Instance<T>) -> T {
        let rates = derive_rates(inst);
        let hw = &inst.hardware;
        let (cp, cd) = (inst.pricing.prefill_price, inst.pricing.decode_price);
        (0..self.num_classes())
            .map(|i| match self.scheme {
                PricingScheme::Bundled => {
                    inst.pricing.request_value(&inst.classes[i])
                        * (rates.mixed[i] * self.y_mixed[i] + rates.solo[i] * self.y_solo[i])
                }
                PricingScheme::Separate => {
                    cp * hw.chunk_size / hw.tau() * self.x[i]
                        + cd / hw.tau() * self.y_mixed[i]
                        + cd * hw.gamma() * self.y_solo[i]
                }
            })
            .sum()
    }

    /// SLI penalty charged against the revenue rate.
    pub fn penalty(&self, inst: &Instance<T>) -> T {
        let max_gap = |v: &[T]| {
            let hi = v.iter().copied().fold(T::neg_infinity(), T::max);
            let lo = v.iter().copied().fold(T::infinity(), T::min);
            (hi - lo).max(T::zero())
        };
        let mut p = T::zero();
        if let Some(SliTerm::Penalty(w)) = self.sli.prefill_fairness {
            p = p + w * max_gap(&self.x);
        }
        if let Some(SliTerm::Penalty(w)) = self.sli.decode_fairness {
            p = p + w * max_gap(&self.y_solo);
        }
        if let Some(SliTerm::Penalty(w)) = self.sli.tpot {
            let hw = &inst.hardware;
            p = p + w * tpot_of_load(self.total_prefill(), hw.tau(), hw.gamma(), hw.batch_cap_scalar());
        }
        p
    }

    /// Occupancy-weighted time per output token of the decode mix; zero when
    /// nothing decodes.
    pub fn tpot(&self, inst: &Instance<T>) -> T {
        let ym: T = self.y_mixed.iter().copied().sum();
        let ys: T = self.y_solo.iter().copied().sum();
        let hw = &inst.hardware;
        crate::scalar::ratio_or_zero(hw.tau() * ym + hw.tau_solo() * ys, ym + ys)
    }

    /// Sets `objective` from the raw occupancy fields.
    pub fn recompute_objective(&mut self, inst: &Instance<T>) {
        self.objective = self.revenue_rate(inst) - self.penalty(inst);
    }

    /// Largest violation of the base LP rows, nonnegativity, zero-buffer rows
    /// and hard SLI bounds.
    pub fn max_residual(&self, inst: &Instance<T>) -> T {
        let rates = derive_rates(inst);
        let hw = &inst.hardware;
        let b = hw.batch_cap_scalar();
        let one = T::one();
        let zero = T::zero();
        let mut worst = zero;
        let mut viol = |v: T| worst = worst.max(v);
        let sx = self.total_prefill();
        let sym: T = self.y_mixed.iter().copied().sum();
        let sys: T = self.y_solo.iter().copied().sum();
        viol(sx - one);
        viol(sym - (b - one) * sx);
        viol(sys - b * (one - sx));
        for (i, c) in inst.classes.iter().enumerate() {
            for v in [self.x[i], self.y_mixed[i], self.y_solo[i], self.q_prefill[i], self.q_decode[i]] {
                viol(-v);
            }
            viol((c.arrival_rate - c.patience_rate * self.q_prefill[i] - rates.prefill[i] * self.x[i]).abs());
            viol(
                (rates.prefill[i] * self.x[i]
                    - c.patience_rate * self.q_decode[i]
                    - rates.mixed[i] * self.y_mixed[i]
                    - rates.solo[i] * self.y_solo[i])
                    .abs(),
            );
            if self.sli.zero_decode_rows() {
                viol(self.q_decode[i].abs());
            }
        }
        let n = self.num_classes();
        for (term, v) in [(self.sli.prefill_fairness, &self.x), (self.sli.decode_fairness, &self.y_solo)] {
            if let Some(SliTerm::Hard(eta)) = term {
                for i in 0..n {
                    for j in 0..n {
                        viol(v[i] - v[j] - eta);
                    }
                }
            }
        }
        if let Some(SliTerm::Hard(eta)) = self.sli.tpot {
            let g = hw.gamma();
            viol((hw.tau() * (b - one) - b / g + eta) * sx - (eta * b - b / g));
        }
        worst
    }

    pub fn dual(&self, row: RowLabel) -> Option<T> {
        self.duals.iter().find(|d| d.row == row).map(|d| d.value)
    }

    /// Marginal optimal-objective gain per unit loosening of the hard bound on
    /// `axis`; `None` when that SLI is not a hard constraint of this plan.
    pub fn shadow_price(&self, axis: FrontierAxis, inst: &Instance<T>) -> Option<T> {
        match axis {
            FrontierAxis::PrefillFairness | FrontierAxis::DecodeFairness => {
                let term = if axis == FrontierAxis::PrefillFairness {
                    self.sli.prefill_fairness
                } else {
                    self.sli.decode_fairness
                };
                let Some(SliTerm::Hard(_)) = term else { return None };
                Some(
                    self.duals
                        .iter()
                        .filter(|d| match d.row {
                            RowLabel::PrefillFairness(..) => axis == FrontierAxis::PrefillFairness,
                            RowLabel::DecodeFairness(..) => axis == FrontierAxis::DecodeFairness,
                            _ => false,
                        })
                        .map(|d| d.value)
                        .sum(),
                )
            }
            FrontierAxis::Tpot => {
                let Some(SliTerm::Hard(_)) = self.sli.tpot else { return None };
                let y = self.dual(RowLabel::TpotCap)?;
                Some(y * (inst.hardware.batch_cap_scalar() - self.total_prefill()))
            }
        }
    }
}

/// Absolute residual allowed on every returned plan.
pub fn residual_tol<T: Scalar>() -> T {
    T::pivot_tol() * T::lit(100.0)
}

/// Solves a built LP and reads back the plan.
pub fn solve_lp<T: Scalar>(problem: &LpProblem<T>) -> Result<FluidPlan<T>, PlanError> {
    let inst = &problem.instance;
    let sol = simplex::solve(&problem.standard_form()).map_err(|e| match e {
        SimplexError::Infeasible => PlanError::Infeasible(diagnose_infeasible(problem)),
        SimplexError::Unbounded => PlanError::Unbounded,
        SimplexError::IterationLimit(_) => PlanError::Solver(e.to_string()),
    })?;
    let ni = inst.num_classes();
    let pick = |f: fn(usize) -> usize| (0..ni).map(|i| sol.x[f(i)]).collect::<Vec<T>>();
    let mut plan = FluidPlan {
        x: pick(x_idx),
        y_mixed: pick(ym_idx),
        y_solo: pick(ys_idx),
        q_prefill: pick(qp_idx),
        q_decode: pick(qd_idx),
        objective: T::zero(),
        scheme: problem.scheme,
        sli: problem.sli.clone(),
        duals: problem
            .rows
            .iter()
            .zip(&sol.duals)
            .map(|(r, &value)| RowDual { row: r.label, value })
            .collect(),
    };
    plan.recompute_objective(inst);
    let residual = plan.max_residual(inst);
    if residual > residual_tol() {
        return Err(PlanError::Numerical {
            residual: residual.as_f64(),
        });
    }
    log::debug!(
        "solved {}-class {} LP in {} pivots, objective {}",
        ni,
        problem.scheme,
        sol.pivots,
        plan.objective
    );
    Ok(plan)
}

fn diagnose_infeasible<T: Scalar>(problem: &LpProblem<T>) -> String {
    let inst = &problem.instance;
    let rates = &problem.rates;
    let hw = &inst.hardware;
    if let Some(SliTerm::Hard(eta)) = problem.sli.tpot {
        if eta < hw.tau_solo() {
            return format!(
                "TPOT cap {eta} s is below the solo-decode floor 1/gamma = {} s",
                hw.tau_solo()
            );
        }
    }
    let impatient_load: T = inst
        .classes
        .iter()
        .enumerate()
        .filter(|(_, c)| c.patience_rate == T::zero())
        .map(|(i, c)| c.arrival_rate / rates.prefill[i])
        .sum();
    if impatient_load > T::one() {
        return format!(
            "classes with zero patience need prefill occupancy {impatient_load} > 1 per GPU (overload cannot be shed by abandonment)"
        );
    }
    if problem.sli.zero_decode_rows() {
        return "zero decode buffer rows cannot be met for classes with zero patience and insufficient decode capacity".into();
    }
    "constraints admit no nonnegative solution".into()
}

/// Builds and solves the LP for `inst` under its own pricing scheme.
pub fn plan<T: Scalar>(inst: &Instance<T>, sli: &SliSpec<T>) -> Result<FluidPlan<T>, PlanError> {
    plan_with_scheme(inst, sli, inst.pricing.scheme)
}

pub fn plan_with_scheme<T: Scalar>(
    inst: &Instance<T>,
    sli: &SliSpec<T>,
    scheme: PricingScheme,
) -> Result<FluidPlan<T>, PlanError> {
    solve_lp(&build_lp(inst, sli, scheme)?)
}
