//! Deterministic fluid dynamics under the planned policies.
//!
//! Decode mass is tracked per GPU group: `z_mix` lives on the mixed group (or
//! mixed pool) and `z_solo` on the solo group. Mixed-group decodes run at the
//! mixed rate only while their host runs a prefill; with a group of size
//! `g = sum x*` and total prefill occupancy `S`, that is a fraction
//! `min(1, S / g)` of them, so `y_m = z_mix * min(1, S/g)` and the rest count
//! as solo-mode occupancy.
//!
//! Boundary behaviour of the admission controls is realized by first-order
//! relaxation with gain `K`: a control that would jump to fill free capacity
//! or drain a queue instead fills or drains it at rate `K` times the gap.
//! Fixed points are unaffected by `K`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{derive_rates, Instance};
use crate::planner::{derive_policy_params, FluidPlan};
use crate::policy::{Admission, PolicyKind, Routing};
use crate::scalar::Scalar;

/// Largest projection correction accepted in one step.
pub const PROJECTION_LIMIT: f64 = 1e-6;
/// Slack on the state invariants.
pub const STATE_TOL: f64 = 1e-9;
pub const DEFAULT_RELAXATION: f64 = 50.0;

#[derive(Debug, Error)]
pub enum FluidError {
    #[error("policy {0} has no fluid model (requires static planning)")]
    UnsupportedPolicy(PolicyKind),
    #[error("state violates invariants: {0}")]
    InfeasibleState(String),
    #[error("projection correction {correction:e} at t = {t} exceeds {PROJECTION_LIMIT:e}; reduce dt")]
    StepTooLarge { t: f64, correction: f64 },
    #[error("invalid integration grid: {0}")]
    InvalidGrid(String),
    #[error("state has {got} classes, model has {want}")]
    Shape { got: usize, want: usize },
}

/// Per-GPU fluid masses.
///
/// Greedy routing keeps its single shared decode buffer in `q_dm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidState<T: Scalar> {
    pub t: T,
    pub q_p: Vec<T>,
    pub x: Vec<T>,
    pub q_dm: Vec<T>,
    pub q_ds: Vec<T>,
    pub z_mix: Vec<T>,
    pub z_solo: Vec<T>,
}

const FIELDS: usize = 6;

impl<T: Scalar> FluidState<T> {
    pub fn empty(num_classes: usize) -> Self {
        let z = vec![T::zero(); num_classes];
        Self {
            t: T::zero(),
            q_p: z.clone(),
            x: z.clone(),
            q_dm: z.clone(),
            q_ds: z.clone(),
            z_mix: z.clone(),
            z_solo: z,
        }
    }

    /// The plan's steady state, with decode buffers split by pool as the
    /// given policy would hold them.
    pub fn at_plan(plan: &FluidPlan<T>, inst: &Instance<T>, policy: PolicyKind) -> Self {
        let params = derive_policy_params(plan, 1, inst);
        let (q_dm, q_ds) = match policy.routing() {
            Routing::Pool | Routing::PoolWeighted => (params.pool_queue_mixed, params.pool_queue_solo),
            _ => (plan.q_decode.clone(), vec![T::zero(); plan.num_classes()]),
        };
        Self {
            t: T::zero(),
            q_p: plan.q_prefill.clone(),
            x: plan.x.clone(),
            q_dm,
            q_ds,
            z_mix: plan.y_mixed.clone(),
            z_solo: plan.y_solo.clone(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.x.len()
    }

    pub fn q_d(&self, i: usize) -> T {
        self.q_dm[i] + self.q_ds[i]
    }

    pub fn total_q_d(&self) -> T {
        (0..self.num_classes()).map(|i| self.q_d(i)).sum()
    }

    fn pack(&self, out: &mut Vec<T>) {
        out.clear();
        for v in [&self.q_p, &self.x, &self.q_dm, &self.q_ds, &self.z_mix, &self.z_solo] {
            out.extend_from_slice(v);
        }
    }

    fn unpack(t: T, flat: &[T], ni: usize) -> Self {
        let part = |k: usize| flat[k * ni..(k + 1) * ni].to_vec();
        Self {
            t,
            q_p: part(0),
            x: part(1),
            q_dm: part(2),
            q_ds: part(3),
            z_mix: part(4),
            z_solo: part(5),
        }
    }
}

/// Weighted decode work `sum_i (q_d,i + y_m,i + y_s,i) / mu_m,i`.
pub fn weighted_decode_work<T: Scalar>(state: &FluidState<T>, mixed_rates: &[T]) -> T {
    (0..state.num_classes())
        .map(|i| (state.q_d(i) + state.z_mix[i] + state.z_solo[i]) / mixed_rates[i])
        .sum()
}

/// Policy-induced vector field for one instance and plan.
#[derive(Debug, Clone)]
pub struct FluidModel<T: Scalar> {
    pub policy: PolicyKind,
    pub relaxation: T,
    lambda: Vec<T>,
    theta: Vec<T>,
    mu_p: Vec<T>,
    mu_m: Vec<T>,
    mu_s: Vec<T>,
    target: Vec<T>,
    group: T,
    cap_mix: T,
    cap_solo: T,
    solo_probs: Vec<T>,
    weights_mix: Vec<T>,
    weights_solo: Vec<T>,
    priority_order: Vec<usize>,
}

impl<T: Scalar> FluidModel<T> {
    pub fn new(inst: &Instance<T>, plan: &FluidPlan<T>, policy: PolicyKind) -> Result<Self, FluidError> {
        if !policy.static_planning() {
            return Err(FluidError::UnsupportedPolicy(policy));
        }
        let ni = inst.num_classes();
        if plan.num_classes() != ni {
            return Err(FluidError::Shape {
                got: plan.num_classes(),
                want: ni,
            });
        }
        let rates = derive_rates(inst);
        let params = derive_policy_params(plan, 1, inst);
        let b = inst.hardware.batch_cap_scalar();
        let group = plan.total_prefill().min(T::one());
        let mut priority_order: Vec<usize> = (0..ni).collect();
        priority_order.sort_by(|&a, &c| {
            params.priority_index[c]
                .partial_cmp(&params.priority_index[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&c))
        });
        Ok(Self {
            policy,
            relaxation: T::lit(DEFAULT_RELAXATION),
            lambda: inst.classes.iter().map(|c| c.arrival_rate).collect(),
            theta: inst.classes.iter().map(|c| c.patience_rate).collect(),
            mu_p: rates.prefill,
            mu_m: rates.mixed,
            mu_s: rates.solo,
            target: plan.x.clone(),
            group,
            cap_mix: (b - T::one()) * group,
            cap_solo: b * (T::one() - group),
            solo_probs: params.solo_probs,
            weights_mix: params.pool_weights_mixed,
            weights_solo: params.pool_weights_solo,
            priority_order,
        })
    }

    pub fn with_relaxation(mut self, k: T) -> Self {
        self.relaxation = k;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.lambda.len()
    }

    pub fn mixed_rates(&self) -> &[T] {
        &self.mu_m
    }

    pub fn targets(&self) -> &[T] {
        &self.target
    }

    /// Fraction of mixed-group GPUs currently running a prefill.
    pub fn busy_fraction(&self, state: &FluidState<T>) -> T {
        if self.group > T::zero() {
            (state.x.iter().copied().sum::<T>() / self.group).min(T::one())
        } else {
            T::zero()
        }
    }

    /// Mixed-mode decode occupancy of class `i`.
    pub fn y_mixed(&self, state: &FluidState<T>, i: usize) -> T {
        state.z_mix[i] * self.busy_fraction(state)
    }

    /// Solo-mode decode occupancy of class `i`.
    pub fn y_solo(&self, state: &FluidState<T>, i: usize) -> T {
        state.z_solo[i] + state.z_mix[i] - self.y_mixed(state, i)
    }

    pub fn check_state(&self, state: &FluidState<T>) -> Result<(), FluidError> {
        let ni = self.num_classes();
        if state.num_classes() != ni {
            return Err(FluidError::Shape {
                got: state.num_classes(),
                want: ni,
            });
        }
        let tol = T::lit(STATE_TOL);
        for v in [&state.q_p, &state.x, &state.q_dm, &state.q_ds, &state.z_mix, &state.z_solo] {
            if let Some(bad) = v.iter().find(|&&m| !(m >= -tol)) {
                return Err(FluidError::InfeasibleState(format!("negative or NaN mass {bad}")));
            }
        }
        let sx: T = state.x.iter().copied().sum();
        let zm: T = state.z_mix.iter().copied().sum();
        let zs: T = state.z_solo.iter().copied().sum();
        if sx > self.group.max(T::zero()) + tol && sx > T::one() + tol {
            return Err(FluidError::InfeasibleState(format!("prefill occupancy {sx} exceeds 1")));
        }
        if zm > self.cap_mix + tol {
            return Err(FluidError::InfeasibleState(format!(
                "mixed-group decode mass {zm} exceeds capacity {}",
                self.cap_mix
            )));
        }
        if zs > self.cap_solo + tol {
            return Err(FluidError::InfeasibleState(format!(
                "solo-group decode mass {zs} exceeds capacity {}",
                self.cap_solo
            )));
        }
        Ok(())
    }

    /// Time derivative of `state`; the returned value's `t` is 1.
    pub fn rhs(&self, state: &FluidState<T>) -> Result<FluidState<T>, FluidError> {
        self.check_state(state)?;
        let mut flat = Vec::with_capacity(FIELDS * self.num_classes());
        state.pack(&mut flat);
        let mut out = vec![T::zero(); flat.len()];
        self.rhs_flat(&flat, &mut out);
        Ok(FluidState::unpack(T::one(), &out, self.num_classes()))
    }

    fn rhs_flat(&self, s: &[T], d: &mut [T]) {
        let ni = self.num_classes();
        let k = self.relaxation;
        let zero = T::zero();
        let q_p = &s[0..ni];
        let x = &s[ni..2 * ni];
        let q_dm = &s[2 * ni..3 * ni];
        let q_ds = &s[3 * ni..4 * ni];
        let z_mix = &s[4 * ni..5 * ni];
        let z_solo = &s[5 * ni..6 * ni];
        let sx: T = x.iter().copied().sum();

        // Prefill admission.
        let mut u = vec![zero; ni];
        let avail: Vec<T> = (0..ni).map(|i| (self.lambda[i] + k * q_p[i]).max(zero)).collect();
        let budget = ((0..ni).map(|i| self.mu_p[i] * x[i]).sum::<T>() + k * (self.group - sx)).max(zero);
        match self.policy.admission() {
            Admission::Gate => {
                for i in 0..ni {
                    if self.target[i] > zero {
                        let hold = self.mu_p[i] * x[i] + k * (self.target[i] - x[i]);
                        u[i] = avail[i].min(hold).max(zero);
                    }
                }
            }
            Admission::Fcfs => proportional(&avail, budget, &mut u),
            Admission::Priority => {
                let mut rem = budget;
                for &i in &self.priority_order {
                    u[i] = avail[i].min(rem).max(zero);
                    rem = rem - u[i];
                }
            }
        }

        // Decode routing.
        let busy = if self.group > zero {
            (sx / self.group).min(T::one())
        } else {
            zero
        };
        let mix_rate: Vec<T> = (0..ni)
            .map(|i| self.mu_m[i] * busy + self.mu_s[i] * (T::one() - busy))
            .collect();
        let freed_mix: T = (0..ni).map(|i| mix_rate[i] * z_mix[i]).sum();
        let freed_solo: T = (0..ni).map(|i| self.mu_s[i] * z_solo[i]).sum();
        let room_mix = (freed_mix + k * (self.cap_mix - z_mix.iter().copied().sum::<T>())).max(zero);
        let room_solo = (freed_solo + k * (self.cap_solo - z_solo.iter().copied().sum::<T>())).max(zero);
        let out_p: Vec<T> = (0..ni).map(|i| self.mu_p[i] * x[i]).collect();

        let mut adm_mix = vec![zero; ni];
        let mut adm_solo = vec![zero; ni];
        let mut in_dm = out_p.clone();
        let mut in_ds = vec![zero; ni];
        match self.policy.routing() {
            Routing::Greedy => {
                let a: Vec<T> = (0..ni).map(|i| out_p[i] + k * q_dm[i]).collect();
                proportional(&a, room_solo, &mut adm_solo);
                let rest: Vec<T> = (0..ni).map(|i| (a[i] - adm_solo[i]).max(zero)).collect();
                proportional(&rest, room_mix, &mut adm_mix);
            }
            Routing::Pool | Routing::PoolWeighted => {
                for i in 0..ni {
                    in_ds[i] = self.solo_probs[i] * out_p[i];
                    in_dm[i] = out_p[i] - in_ds[i];
                }
                let a_mix: Vec<T> = (0..ni).map(|i| in_dm[i] + k * q_dm[i]).collect();
                let a_solo: Vec<T> = (0..ni).map(|i| in_ds[i] + k * q_ds[i]).collect();
                if self.policy.routing() == Routing::Pool {
                    proportional(&a_mix, room_mix, &mut adm_mix);
                    proportional(&a_solo, room_solo, &mut adm_solo);
                } else {
                    water_fill(&a_mix, &self.weights_mix, room_mix, &mut adm_mix);
                    water_fill(&a_solo, &self.weights_solo, room_solo, &mut adm_solo);
                }
            }
            Routing::Coupled | Routing::Decoupled => unreachable!("rejected in FluidModel::new"),
        }

        for i in 0..ni {
            d[i] = self.lambda[i] - self.theta[i] * q_p[i] - u[i];
            d[ni + i] = u[i] - self.mu_p[i] * x[i];
            d[4 * ni + i] = adm_mix[i] - mix_rate[i] * z_mix[i];
            d[5 * ni + i] = adm_solo[i] - self.mu_s[i] * z_solo[i];
            match self.policy.routing() {
                Routing::Greedy => {
                    d[2 * ni + i] = out_p[i] - self.theta[i] * q_dm[i] - adm_mix[i] - adm_solo[i];
                    d[3 * ni + i] = zero;
                }
                _ => {
                    d[2 * ni + i] = in_dm[i] - self.theta[i] * q_dm[i] - adm_mix[i];
                    d[3 * ni + i] = in_ds[i] - self.theta[i] * q_ds[i] - adm_solo[i];
                }
            }
        }
    }

    /// Clamps to the nonnegative orthant and the group capacities; returns the
    /// largest change made.
    fn project(&self, s: &mut [T]) -> T {
        let ni = self.num_classes();
        let mut worst = T::zero();
        for v in s.iter_mut() {
            if *v < T::zero() {
                worst = worst.max(-*v);
                *v = T::zero();
            }
        }
        for (block, cap) in [(1usize, self.group.max(T::zero())), (4, self.cap_mix), (5, self.cap_solo)] {
            let seg = &mut s[block * ni..(block + 1) * ni];
            let total: T = seg.iter().copied().sum();
            if total > cap {
                let scale = if total > T::zero() { cap / total } else { T::zero() };
                for v in seg.iter_mut() {
                    let nv = *v * scale;
                    worst = worst.max(*v - nv);
                    *v = nv;
                }
            }
        }
        worst
    }
}

/// `out_i = a_i * min(1, budget / sum a)`.
fn proportional<T: Scalar>(a: &[T], budget: T, out: &mut [T]) {
    let total: T = a.iter().copied().sum();
    let f = if total > T::zero() {
        (budget / total).min(T::one())
    } else {
        T::zero()
    };
    for (o, &v) in out.iter_mut().zip(a) {
        *o = v * f;
    }
}

/// Splits `budget` in proportion to `w`, capping each class at `a_i` and
/// passing the excess on. Whatever the weighted classes cannot absorb goes to
/// the remaining classes in proportion to `a`.
fn water_fill<T: Scalar>(a: &[T], w: &[T], budget: T, out: &mut [T]) {
    let n = a.len();
    out.iter_mut().for_each(|o| *o = T::zero());
    let mut rem = budget.max(T::zero());
    let mut active: Vec<bool> = (0..n).map(|i| w[i] > T::zero() && a[i] > T::zero()).collect();
    while rem > T::zero() {
        let wsum: T = (0..n).filter(|&i| active[i]).map(|i| w[i]).sum();
        if wsum <= T::zero() {
            break;
        }
        let mut capped = false;
        for i in 0..n {
            if active[i] && rem * w[i] / wsum >= a[i] - out[i] {
                capped = true;
            }
        }
        if !capped {
            for i in 0..n {
                if active[i] {
                    out[i] = out[i] + rem * w[i] / wsum;
                }
            }
            return;
        }
        let mut used = T::zero();
        for i in 0..n {
            if active[i] && rem * w[i] / wsum >= a[i] - out[i] {
                used = used + (a[i] - out[i]);
                out[i] = a[i];
                active[i] = false;
            }
        }
        rem = (rem - used).max(T::zero());
    }
    let rest: Vec<T> = (0..n).map(|i| (a[i] - out[i]).max(T::zero())).collect();
    let mut extra = vec![T::zero(); n];
    proportional(&rest, rem, &mut extra);
    for i in 0..n {
        out[i] = out[i] + extra[i];
    }
}

/// Sampled trajectory and terminal diagnostics.
#[derive(Debug, Clone)]
pub struct FluidTrajectory<T: Scalar> {
    pub policy: PolicyKind,
    pub samples: Vec<FluidState<T>>,
    /// `W_d` at each sample.
    pub decode_work: Vec<T>,
    /// `max_i |x_i(T) - x_i*|`.
    pub terminal_x_error: T,
    /// Total decode buffer at the final sample.
    pub terminal_q_d: T,
    /// Checked steps where `W_d` decreased more slowly than the abandonment
    /// bound allows.
    pub drift_violations: usize,
    /// Steps where the drift check applied: `x` at its target, both decode
    /// groups full and decode buffers above `STATE_TOL` at both ends.
    pub drift_checks: usize,
}

/// Tolerance for "x sits at its target" and "decode capacity is full" in the
/// drift check.
pub const LOCK_TOL: f64 = 1e-6;
/// Allowed excess of the discrete `W_d` slope over the drift bound.
pub const DRIFT_TOL: f64 = 1e-6;

/// Fixed-step RK4 with projection after every step.
pub fn integrate<T: Scalar>(
    model: &FluidModel<T>,
    initial: &FluidState<T>,
    horizon: T,
    dt: T,
) -> Result<FluidTrajectory<T>, FluidError> {
    if !(dt > T::zero()) || !(horizon >= dt) {
        return Err(FluidError::InvalidGrid(format!("need dt > 0 and T >= dt, got dt = {dt}, T = {horizon}")));
    }
    model.check_state(initial)?;
    let ni = model.num_classes();
    let steps = (horizon / dt).round().to_usize().unwrap_or(0).max(1);
    let mut y = Vec::with_capacity(FIELDS * ni);
    initial.pack(&mut y);
    let len = y.len();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    let half = dt / T::lit(2.0);
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);

    let theta_over_mu: T = (0..ni)
        .map(|i| model.theta[i] / model.mu_m[i])
        .fold(T::infinity(), T::min);
    let mut samples = Vec::with_capacity(steps + 1);
    let mut work = Vec::with_capacity(steps + 1);
    let mut drift_violations = 0;
    let mut drift_checks = 0;
    let mut t = initial.t;
    samples.push(initial.clone());
    work.push(weighted_decode_work(initial, &model.mu_m));

    for _ in 0..steps {
        model.rhs_flat(&y, &mut k1);
        axpy(&y, half, &k1, &mut tmp);
        model.rhs_flat(&tmp, &mut k2);
        axpy(&y, half, &k2, &mut tmp);
        model.rhs_flat(&tmp, &mut k3);
        axpy(&y, dt, &k3, &mut tmp);
        model.rhs_flat(&tmp, &mut k4);
        for j in 0..len {
            y[j] = y[j] + sixth * (k1[j] + two * k2[j] + two * k3[j] + k4[j]);
        }
        t = t + dt;
        let correction = model.project(&mut y);
        if correction > T::lit(PROJECTION_LIMIT) {
            return Err(FluidError::StepTooLarge {
                t: t.as_f64(),
                correction: correction.as_f64(),
            });
        }
        let state = FluidState::unpack(t, &y, ni);
        let w = weighted_decode_work(&state, &model.mu_m);
        let prev = samples.last().expect("initial sample");
        let locked = |s: &FluidState<T>| {
            (0..ni).all(|i| (s.x[i] - model.target[i]).abs() <= T::lit(LOCK_TOL))
        };
        let pinned = |s: &FluidState<T>| {
            let zm: T = s.z_mix.iter().copied().sum();
            let zs: T = s.z_solo.iter().copied().sum();
            s.total_q_d() > T::lit(STATE_TOL)
                && (model.cap_mix - zm).abs() <= T::lit(LOCK_TOL)
                && (model.cap_solo - zs).abs() <= T::lit(LOCK_TOL)
        };
        let qd_mean = (prev.total_q_d() + state.total_q_d()) / two;
        if pinned(prev) && pinned(&state) && locked(prev) && locked(&state) {
            drift_checks += 1;
            let slope = (w - *work.last().expect("initial work")) / dt;
            if slope > -theta_over_mu * qd_mean + T::lit(DRIFT_TOL) {
                drift_violations += 1;
            }
        }
        samples.push(state);
        work.push(w);
    }
    let last = samples.last().expect("at least one step");
    let terminal_x_error = (0..ni)
        .map(|i| (last.x[i] - model.target[i]).abs())
        .fold(T::zero(), T::max);
    let terminal_q_d = last.total_q_d();
    Ok(FluidTrajectory {
        policy: model.policy,
        samples,
        decode_work: work,
        terminal_x_error,
        terminal_q_d,
        drift_violations,
        drift_checks,
    })
}

fn axpy<T: Scalar>(y: &[T], h: T, k: &[T], out: &mut [T]) {
    for j in 0..y.len() {
        out[j] = y[j] + h * k[j];
    }
}

/// One classical RK4 step of `dy/dt = f(y)`.
pub fn rk4_step<T: Scalar>(f: impl Fn(&[T], &mut [T]), y: &mut [T], dt: T) {
    let n = y.len();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
    let half = dt / T::lit(2.0);
    f(y, &mut k1);
    axpy(y, half, &k1, &mut tmp);
    f(&tmp, &mut k2);
    axpy(y, half, &k2, &mut tmp);
    f(&tmp, &mut k3);
    axpy(y, dt, &k3, &mut tmp);
    f(&tmp, &mut k4);
    let sixth = dt / T::lit(6.0);
    let two = T::lit(2.0);
    for j in 0..n {
        y[j] = y[j] + sixth * (k1[j] + two * k2[j] + two * k3[j] + k4[j]);
    }
}
