use serde::{Deserialize, Serialize};

use crate::model::{derive_rates, Instance};
use crate::scalar::{ratio_or_zero, Scalar};

use super::FluidPlan;

/// Control parameters for an `n`-GPU cluster derived from a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<T: Scalar> {
    pub n: usize,
    /// Size of the mixed GPU group.
    pub mixed_gpus: usize,
    /// Cluster-level prefill queue targets used to break gate ties.
    pub prefill_queue_targets: Vec<i64>,
    /// Probability that a finished prefill is routed to the solo pool.
    pub solo_probs: Vec<T>,
    pub pool_weights_mixed: Vec<T>,
    pub pool_weights_solo: Vec<T>,
    /// `D / P`, larger is served first by the prioritizing gate.
    pub priority_index: Vec<T>,
    pub pool_queue_mixed: Vec<T>,
    pub pool_queue_solo: Vec<T>,
}

impl<T: Scalar> PolicyParams<T> {
    pub fn solo_gpus(&self) -> usize {
        self.n - self.mixed_gpus
    }
}

pub fn derive_policy_params<T: Scalar>(plan: &FluidPlan<T>, n: usize, inst: &Instance<T>) -> PolicyParams<T> {
    let rates = derive_rates(inst);
    let ni = plan.num_classes();
    let nf = T::from_usize_lossy(n);
    let load = (nf * plan.total_prefill() - T::lit(1e-9)).ceil().max(T::zero());
    let mixed_gpus = load.to_usize().unwrap_or(n).min(n);
    let prefill_queue_targets = plan
        .q_prefill
        .iter()
        .map(|&q| (nf * q).round().to_i64().unwrap_or(i64::MAX))
        .collect();
    let mixed_flow: Vec<T> = (0..ni).map(|i| rates.mixed[i] * plan.y_mixed[i]).collect();
    let solo_flow: Vec<T> = (0..ni).map(|i| rates.solo[i] * plan.y_solo[i]).collect();
    let solo_probs: Vec<T> = (0..ni)
        .map(|i| {
            let total = mixed_flow[i] + solo_flow[i];
            if total > T::zero() {
                solo_flow[i] / total
            } else {
                T::one()
            }
        })
        .collect();
    let mixed_total: T = mixed_flow.iter().copied().sum();
    let solo_total: T = solo_flow.iter().copied().sum();
    PolicyParams {
        n,
        mixed_gpus,
        prefill_queue_targets,
        pool_weights_mixed: mixed_flow.iter().map(|&f| ratio_or_zero(f, mixed_total)).collect(),
        pool_weights_solo: solo_flow.iter().map(|&f| ratio_or_zero(f, solo_total)).collect(),
        priority_index: inst
            .classes
            .iter()
            .map(|c| c.decode_len / c.prompt_len)
            .collect(),
        pool_queue_mixed: (0..ni)
            .map(|i| (T::one() - solo_probs[i]) * plan.q_decode[i])
            .collect(),
        pool_queue_solo: (0..ni).map(|i| solo_probs[i] * plan.q_decode[i]).collect(),
        solo_probs,
    }
}
