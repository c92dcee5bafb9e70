//! Control policy catalogue shared by the fluid model and the simulator.
//!
//! Every policy is a combination of a prefill admission rule, a decode
//! routing rule and a GPU layout.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolicyKind {
    /// Occupancy gate, greedy solo-first router, static planning.
    #[serde(rename = "gg-sp")]
    GgSp,
    /// FCFS admission, immediate (coupled) decode, no static planning.
    #[serde(rename = "fi-wsp")]
    FiWsp,
    /// Occupancy gate, immediate (coupled) decode, no static planning.
    #[serde(rename = "gi-wsp")]
    GiWsp,
    /// Occupancy gate, free routing favouring new prefills, no static planning.
    #[serde(rename = "gf-wsp")]
    GfWsp,
    /// FCFS admission, greedy router, static planning.
    #[serde(rename = "fg-sp")]
    FgSp,
    /// Strict priority by `D / P`, greedy router, static planning.
    #[serde(rename = "prioritize")]
    PrioritizeRoute,
    /// Occupancy gate, randomized two-pool router.
    #[serde(rename = "sli")]
    SliAware,
    /// Occupancy gate, two-pool router with weighted buffer selection.
    #[serde(rename = "sli-general")]
    SliAwareGeneral,
}

/// How prefill work is admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Gate,
    Fcfs,
    Priority,
}

/// How a finished prefill finds a decode slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Solo group first, then mixed group, then one shared FCFS buffer.
    Greedy,
    /// Randomized pool choice with per-pool FCFS buffers.
    Pool,
    /// Randomized pool choice, buffers served by class weights.
    PoolWeighted,
    /// Decode stays in the slot the prefill used.
    Coupled,
    /// Any GPU with a free slot, new prefills served before waiting decodes.
    Decoupled,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 8] = [
        Self::GgSp,
        Self::FiWsp,
        Self::GiWsp,
        Self::GfWsp,
        Self::FgSp,
        Self::PrioritizeRoute,
        Self::SliAware,
        Self::SliAwareGeneral,
    ];

    /// The five policies compared in the baseline experiment.
    pub const BASELINES: [PolicyKind; 5] = [Self::GgSp, Self::FiWsp, Self::GiWsp, Self::GfWsp, Self::FgSp];

    pub fn name(self) -> &'static str {
        match self {
            Self::GgSp => "gg-sp",
            Self::FiWsp => "fi-wsp",
            Self::GiWsp => "gi-wsp",
            Self::GfWsp => "gf-wsp",
            Self::FgSp => "fg-sp",
            Self::PrioritizeRoute => "prioritize",
            Self::SliAware => "sli",
            Self::SliAwareGeneral => "sli-general",
        }
    }

    pub fn admission(self) -> Admission {
        match self {
            Self::FiWsp | Self::FgSp => Admission::Fcfs,
            Self::PrioritizeRoute => Admission::Priority,
            _ => Admission::Gate,
        }
    }

    pub fn routing(self) -> Routing {
        match self {
            Self::GgSp | Self::FgSp | Self::PrioritizeRoute => Routing::Greedy,
            Self::SliAware => Routing::Pool,
            Self::SliAwareGeneral => Routing::PoolWeighted,
            Self::FiWsp | Self::GiWsp => Routing::Coupled,
            Self::GfWsp => Routing::Decoupled,
        }
    }

    /// Whether the cluster is split into mixed and solo groups up front.
    pub fn static_planning(self) -> bool {
        !matches!(self, Self::FiWsp | Self::GiWsp | Self::GfWsp)
    }

    /// Whether the policy reads occupancy targets from a plan.
    pub fn needs_plan(self) -> bool {
        self.admission() == Admission::Gate || self.static_planning()
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|p| p.name() == key)
            .or(match key.as_str() {
                "prioritize-route" => Some(Self::PrioritizeRoute),
                "sli-aware" => Some(Self::SliAware),
                "sli-aware-general" => Some(Self::SliAwareGeneral),
                _ => None,
            })
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|p| p.name()).collect();
                format!("unknown policy `{s}` (expected one of {})", names.join(", "))
            })
    }
}
