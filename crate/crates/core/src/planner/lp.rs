//! Standard-form construction of the steady-state occupancy LP.
//!
//! Variables are laid out class-major: `[x, y_m, y_s, q_p, q_d]` for class 0,
//! then class 1, and so on, followed by any SLI auxiliaries.

use serde::{Deserialize, Serialize};

use crate::model::{derive_rates, Instance, PricingScheme, ServiceRates};
use crate::scalar::Scalar;

use super::simplex::{RowKind, StandardForm};
use super::PlanError;

/// Number of tangent cuts used for the convex TPOT penalty epigraph.
pub const TPOT_TANGENTS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliTerm<T: Scalar> {
    /// Hard bound `eta`.
    Hard(T),
    /// Objective penalty with weight `eta'`.
    Penalty(T),
}

impl<T: Scalar> SliTerm<T> {
    pub fn value(&self) -> T {
        match *self {
            SliTerm::Hard(v) | SliTerm::Penalty(v) => v,
        }
    }
}

/// Service-level terms appended to the base LP.
///
/// ```json
/// {"prefill_fairness": {"hard": 0.05}, "tpot": {"penalty": 2.0}}
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliSpec<T: Scalar> {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_fairness: Option<SliTerm<T>>,
    /// A hard decode-fairness bound also pins every decode buffer to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_fairness: Option<SliTerm<T>>,
    /// Cap on the average time per output token, in seconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot: Option<SliTerm<T>>,
    #[serde(default)]
    pub force_zero_decode_buffer: bool,
}

impl<T: Scalar> Default for SliSpec<T> {
    fn default() -> Self {
        Self {
            prefill_fairness: None,
            decode_fairness: None,
            tpot: None,
            force_zero_decode_buffer: false,
        }
    }
}

impl<T: Scalar> SliSpec<T> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn zero_decode_buffer() -> Self {
        Self {
            force_zero_decode_buffer: true,
            ..Self::default()
        }
    }

    /// True when no fairness or TPOT term is present.
    pub fn is_unconstrained(&self) -> bool {
        self.prefill_fairness.is_none() && self.decode_fairness.is_none() && self.tpot.is_none()
    }

    pub fn zero_decode_rows(&self) -> bool {
        self.force_zero_decode_buffer || matches!(self.decode_fairness, Some(SliTerm::Hard(_)))
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        for (name, term) in [
            ("prefill_fairness", self.prefill_fairness),
            ("decode_fairness", self.decode_fairness),
            ("tpot", self.tpot),
        ] {
            match term {
                Some(SliTerm::Hard(v)) if !(v > T::zero()) => {
                    return Err(PlanError::InvalidSli(format!("{name}: hard bound must be > 0, got {v}")))
                }
                Some(SliTerm::Penalty(v)) if !(v >= T::zero()) => {
                    return Err(PlanError::InvalidSli(format!("{name}: penalty weight must be >= 0, got {v}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarRole {
    Prefill(usize),
    Mixed(usize),
    Solo(usize),
    PrefillQueue(usize),
    DecodeQueue(usize),
    /// Epigraph of the largest pairwise prefill occupancy gap.
    PrefillGap,
    /// Epigraph of the largest pairwise solo decode occupancy gap.
    DecodeGap,
    /// Epigraph of the average TPOT.
    Tpot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowLabel {
    PrefillCapacity,
    MixedCapacity,
    SoloCapacity,
    PrefillBalance(usize),
    DecodeBalance(usize),
    PrefillFairness(usize, usize),
    DecodeFairness(usize, usize),
    PrefillGapCut(usize, usize),
    DecodeGapCut(usize, usize),
    TpotCap,
    TpotCut(usize),
    ZeroDecodeBuffer(usize),
}

impl std::fmt::Display for RowLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RowLabel::PrefillCapacity => write!(f, "prefill_capacity"),
            RowLabel::MixedCapacity => write!(f, "mixed_capacity"),
            RowLabel::SoloCapacity => write!(f, "solo_capacity"),
            RowLabel::PrefillBalance(i) => write!(f, "prefill_balance[{i}]"),
            RowLabel::DecodeBalance(i) => write!(f, "decode_balance[{i}]"),
            RowLabel::PrefillFairness(i, j) => write!(f, "prefill_fairness[{i},{j}]"),
            RowLabel::DecodeFairness(i, j) => write!(f, "decode_fairness[{i},{j}]"),
            RowLabel::PrefillGapCut(i, j) => write!(f, "prefill_gap[{i},{j}]"),
            RowLabel::DecodeGapCut(i, j) => write!(f, "decode_gap[{i},{j}]"),
            RowLabel::TpotCap => write!(f, "tpot_cap"),
            RowLabel::TpotCut(k) => write!(f, "tpot_cut[{k}]"),
            RowLabel::ZeroDecodeBuffer(i) => write!(f, "zero_decode_buffer[{i}]"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpRow<T: Scalar> {
    pub label: RowLabel,
    pub coeffs: Vec<T>,
    pub kind: RowKind,
    pub rhs: T,
}

/// A fully built LP together with the context needed to read a plan back.
#[derive(Debug, Clone)]
pub struct LpProblem<T: Scalar> {
    pub instance: Instance<T>,
    pub sli: SliSpec<T>,
    pub scheme: PricingScheme,
    pub rates: ServiceRates<T>,
    pub vars: Vec<VarRole>,
    pub objective: Vec<T>,
    pub rows: Vec<LpRow<T>>,
}

impl<T: Scalar> LpProblem<T> {
    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn count_rows(&self, kind: RowKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    pub fn var_index(&self, role: VarRole) -> Option<usize> {
        self.vars.iter().position(|v| *v == role)
    }

    pub fn standard_form(&self) -> StandardForm<T> {
        StandardForm {
            objective: self.objective.clone(),
            rows: self
                .rows
                .iter()
                .map(|r| (r.coeffs.clone(), r.kind, r.rhs))
                .collect(),
        }
    }
}

#[inline]
pub(crate) fn x_idx(i: usize) -> usize {
    5 * i
}
#[inline]
pub(crate) fn ym_idx(i: usize) -> usize {
    5 * i + 1
}
#[inline]
pub(crate) fn ys_idx(i: usize) -> usize {
    5 * i + 2
}
#[inline]
pub(crate) fn qp_idx(i: usize) -> usize {
    5 * i + 3
}
#[inline]
pub(crate) fn qd_idx(i: usize) -> usize {
    5 * i + 4
}

/// Average TPOT as a function of the total prefill occupancy `s`, assuming
/// full decode utilization: `(tau (B-1) s + B (1-s)/gamma) / (B - s)`.
pub fn tpot_of_load<T: Scalar>(s: T, tau: T, gamma: T, b: T) -> T {
    (tau * (b - T::one()) * s + b * (T::one() - s) / gamma) / (b - s)
}

fn tpot_slope<T: Scalar>(s: T, tau: T, gamma: T, b: T) -> T {
    let num = (tau * (b - T::one()) - b / gamma) * b + b / gamma;
    num / ((b - s) * (b - s))
}

/// Builds the LP for `inst` under `scheme` with the SLI terms in `sli`.
pub fn build_lp<T: Scalar>(
    inst: &Instance<T>,
    sli: &SliSpec<T>,
    scheme: PricingScheme,
) -> Result<LpProblem<T>, PlanError> {
    sli.validate()?;
    let ni = inst.num_classes();
    let rates = derive_rates(inst);
    let hw = &inst.hardware;
    let tau = hw.tau();
    let gamma = hw.gamma();
    let b = hw.batch_cap_scalar();
    let one = T::one();
    let zero = T::zero();

    let mut vars = Vec::with_capacity(5 * ni + 3);
    for i in 0..ni {
        vars.extend([
            VarRole::Prefill(i),
            VarRole::Mixed(i),
            VarRole::Solo(i),
            VarRole::PrefillQueue(i),
            VarRole::DecodeQueue(i),
        ]);
    }
    let prefill_gap = matches!(sli.prefill_fairness, Some(SliTerm::Penalty(_))).then(|| {
        vars.push(VarRole::PrefillGap);
        vars.len() - 1
    });
    let decode_gap = matches!(sli.decode_fairness, Some(SliTerm::Penalty(_))).then(|| {
        vars.push(VarRole::DecodeGap);
        vars.len() - 1
    });
    let tpot_var = matches!(sli.tpot, Some(SliTerm::Penalty(_))).then(|| {
        vars.push(VarRole::Tpot);
        vars.len() - 1
    });
    let nv = vars.len();

    let mut objective = vec![zero; nv];
    let (cp, cd) = (inst.pricing.prefill_price, inst.pricing.decode_price);
    for (i, class) in inst.classes.iter().enumerate() {
        match scheme {
            PricingScheme::Bundled => {
                let w = inst.pricing.request_value(class);
                objective[ym_idx(i)] = w * rates.mixed[i];
                objective[ys_idx(i)] = w * rates.solo[i];
            }
            PricingScheme::Separate => {
                objective[x_idx(i)] = cp * hw.chunk_size / tau;
                objective[ym_idx(i)] = cd / tau;
                objective[ys_idx(i)] = cd * gamma;
            }
        }
    }
    if let (Some(k), Some(SliTerm::Penalty(w))) = (prefill_gap, sli.prefill_fairness) {
        objective[k] = -w;
    }
    if let (Some(k), Some(SliTerm::Penalty(w))) = (decode_gap, sli.decode_fairness) {
        objective[k] = -w;
    }
    if let (Some(k), Some(SliTerm::Penalty(w))) = (tpot_var, sli.tpot) {
        objective[k] = -w;
    }

    let mut rows = Vec::new();
    let mut row = |label: RowLabel, entries: &[(usize, T)], kind: RowKind, rhs: T| {
        let mut coeffs = vec![zero; nv];
        for &(j, v) in entries {
            coeffs[j] = coeffs[j] + v;
        }
        rows.push(LpRow {
            label,
            coeffs,
            kind,
            rhs,
        });
    };

    let sum_x: Vec<(usize, T)> = (0..ni).map(|i| (x_idx(i), one)).collect();
    row(RowLabel::PrefillCapacity, &sum_x, RowKind::Le, one);
    let mixed: Vec<(usize, T)> = (0..ni)
        .flat_map(|i| [(ym_idx(i), one), (x_idx(i), -(b - one))])
        .collect();
    row(RowLabel::MixedCapacity, &mixed, RowKind::Le, zero);
    let solo: Vec<(usize, T)> = (0..ni).flat_map(|i| [(ys_idx(i), one), (x_idx(i), b)]).collect();
    row(RowLabel::SoloCapacity, &solo, RowKind::Le, b);

    for (i, class) in inst.classes.iter().enumerate() {
        row(
            RowLabel::PrefillBalance(i),
            &[(x_idx(i), rates.prefill[i]), (qp_idx(i), class.patience_rate)],
            RowKind::Eq,
            class.arrival_rate,
        );
        row(
            RowLabel::DecodeBalance(i),
            &[
                (x_idx(i), rates.prefill[i]),
                (qd_idx(i), -class.patience_rate),
                (ym_idx(i), -rates.mixed[i]),
                (ys_idx(i), -rates.solo[i]),
            ],
            RowKind::Eq,
            zero,
        );
    }

    for (term, idx, hard_label, cut_label, gap) in [
        (
            sli.prefill_fairness,
            x_idx as fn(usize) -> usize,
            RowLabel::PrefillFairness as fn(usize, usize) -> RowLabel,
            RowLabel::PrefillGapCut as fn(usize, usize) -> RowLabel,
            prefill_gap,
        ),
        (
            sli.decode_fairness,
            ys_idx as fn(usize) -> usize,
            RowLabel::DecodeFairness as fn(usize, usize) -> RowLabel,
            RowLabel::DecodeGapCut as fn(usize, usize) -> RowLabel,
            decode_gap,
        ),
    ] {
        let Some(term) = term else { continue };
        for i in 0..ni {
            for j in 0..ni {
                if i == j {
                    continue;
                }
                match term {
                    SliTerm::Hard(eta) => {
                        row(hard_label(i, j), &[(idx(i), one), (idx(j), -one)], RowKind::Le, eta)
                    }
                    SliTerm::Penalty(_) => {
                        let t = gap.expect("gap variable allocated");
                        row(
                            cut_label(i, j),
                            &[(idx(i), one), (idx(j), -one), (t, -one)],
                            RowKind::Le,
                            zero,
                        )
                    }
                }
            }
        }
    }

    match sli.tpot {
        Some(SliTerm::Hard(eta)) => {
            // (tau (B-1) S + B (1-S)/gamma) <= eta (B - S), with S = sum x.
            let coef = tau * (b - one) - b / gamma + eta;
            let entries: Vec<(usize, T)> = (0..ni).map(|i| (x_idx(i), coef)).collect();
            row(RowLabel::TpotCap, &entries, RowKind::Le, eta * b - b / gamma);
        }
        Some(SliTerm::Penalty(_)) => {
            if !(tau * gamma > one) {
                return Err(PlanError::NonConvexPenalty {
                    gamma_tau: (tau * gamma).as_f64(),
                });
            }
            let t = tpot_var.expect("tpot variable allocated");
            let k = T::from_usize_lossy(TPOT_TANGENTS - 1);
            for cut in 0..TPOT_TANGENTS {
                // t >= f(s) + f'(s) (S - s)
                let s = T::from_usize_lossy(cut) / k;
                let slope = tpot_slope(s, tau, gamma, b);
                let value = tpot_of_load(s, tau, gamma, b);
                let mut entries: Vec<(usize, T)> = (0..ni).map(|i| (x_idx(i), slope)).collect();
                entries.push((t, -one));
                row(RowLabel::TpotCut(cut), &entries, RowKind::Le, slope * s - value);
            }
        }
        None => {}
    }

    if sli.zero_decode_rows() {
        for i in 0..ni {
            row(RowLabel::ZeroDecodeBuffer(i), &[(qd_idx(i), one)], RowKind::Eq, zero);
        }
    }

    Ok(LpProblem {
        instance: inst.clone(),
        sli: sli.clone(),
        scheme,
        rates,
        vars,
        objective,
        rows,
    })
}
