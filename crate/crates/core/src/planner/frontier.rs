use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{Instance, PricingScheme};
use crate::scalar::Scalar;

use super::{plan_with_scheme, PlanError, SliSpec, SliTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrontierAxis {
    Tpot,
    PrefillFairness,
    DecodeFairness,
}

impl FrontierAxis {
    pub const ALL: [FrontierAxis; 3] = [Self::Tpot, Self::PrefillFairness, Self::DecodeFairness];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tpot => "tpot",
            Self::PrefillFairness => "prefill-fairness",
            Self::DecodeFairness => "decode-fairness",
        }
    }

    /// `base` with this axis set to the hard bound `eta`.
    pub fn apply<T: Scalar>(self, base: &SliSpec<T>, eta: T) -> SliSpec<T> {
        let mut sli = base.clone();
        let term = Some(SliTerm::Hard(eta));
        match self {
            Self::Tpot => sli.tpot = term,
            Self::PrefillFairness => sli.prefill_fairness = term,
            Self::DecodeFairness => sli.decode_fairness = term,
        }
        sli
    }
}

impl std::fmt::Display for FrontierAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FrontierAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s || a.name().replace('-', "_") == s)
            .ok_or_else(|| format!("unknown SLI axis `{s}` (tpot, prefill-fairness, decode-fairness)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint<T: Scalar> {
    pub eta: T,
    pub objective: Option<T>,
    pub feasible: bool,
    pub shadow_price: Option<T>,
}

/// Solves one LP per grid value with the hard bound on `axis` set to it.
///
/// Infeasible points are kept with `feasible = false`; other solver failures
/// abort the sweep.
pub fn sweep_frontier<T: Scalar>(
    inst: &Instance<T>,
    axis: FrontierAxis,
    grid: &[T],
    scheme: PricingScheme,
    base: &SliSpec<T>,
) -> Result<Vec<FrontierPoint<T>>, PlanError> {
    grid.par_iter()
        .map(|&eta| match plan_with_scheme(inst, &axis.apply(base, eta), scheme) {
            Ok(p) => Ok(FrontierPoint {
                eta,
                objective: Some(p.objective),
                feasible: true,
                shadow_price: p.shadow_price(axis, inst),
            }),
            Err(PlanError::Infeasible(_)) => Ok(FrontierPoint {
                eta,
                objective: None,
                feasible: false,
                shadow_price: None,
            }),
            Err(e) => Err(e),
        })
        .collect()
}
