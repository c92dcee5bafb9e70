use crate::model::{derive_rates, prop1_condition, Instance, PricingScheme};
use crate::scalar::Scalar;

use super::{FluidPlan, PlanError};

/// Rewrites a bundled plan into one with the same objective and no decode
/// buffer.
///
/// Prefill occupancy is cut back until prefill output matches decode
/// completions, the displaced mass is returned to the prefill queue, and any
/// resulting mixed-capacity overflow is moved to solo slots at equal
/// per-class completion rate.
pub fn eliminate_decode_buffer<T: Scalar>(plan: &FluidPlan<T>, inst: &Instance<T>) -> Result<FluidPlan<T>, PlanError> {
    let ni = inst.num_classes();
    if plan.num_classes() != ni {
        return Err(PlanError::Shape {
            got: plan.num_classes(),
            want: ni,
        });
    }
    let hw = &inst.hardware;
    if !prop1_condition(inst) {
        let b = hw.batch_cap_scalar();
        return Err(PlanError::ConditionViolated {
            gamma_tau: (hw.gamma() * hw.tau()).as_f64(),
            bound: ((b - T::one()) / b).as_f64(),
        });
    }
    if plan.q_decode.iter().all(|&q| q == T::zero()) {
        return Ok(plan.clone());
    }
    if plan.scheme != PricingScheme::Bundled {
        return Err(PlanError::UnsupportedPlan(
            "decode-buffer elimination preserves the objective only under bundled pricing".into(),
        ));
    }
    if !plan.sli.is_unconstrained() {
        return Err(PlanError::UnsupportedPlan(
            "decode-buffer elimination is defined for plans without fairness or TPOT terms".into(),
        ));
    }

    let rates = derive_rates(inst);
    let mut out = plan.clone();
    for i in 0..ni {
        let gap = ((rates.prefill[i] * plan.x[i] - rates.mixed[i] * plan.y_mixed[i] - rates.solo[i] * plan.y_solo[i])
            / rates.prefill[i])
            .max(T::zero())
            .min(plan.x[i]);
        let theta = inst.classes[i].patience_rate;
        if gap > T::zero() {
            if theta == T::zero() {
                if gap > T::pivot_tol() {
                    return Err(PlanError::ZeroPatience { class: i });
                }
            } else {
                out.q_prefill[i] = plan.q_prefill[i] + rates.prefill[i] * gap / theta;
            }
        }
        out.x[i] = plan.x[i] - gap;
        out.q_decode[i] = T::zero();
    }

    let b = hw.batch_cap_scalar();
    let sum_ym: T = out.y_mixed.iter().copied().sum();
    let overflow = sum_ym - (b - T::one()) * out.total_prefill();
    if overflow > T::zero() && sum_ym > T::zero() {
        for i in 0..ni {
            let dm = overflow * plan.y_mixed[i] / sum_ym;
            out.y_mixed[i] = (plan.y_mixed[i] - dm).max(T::zero());
            out.y_solo[i] = plan.y_solo[i] + dm * rates.mixed[i] / rates.solo[i];
        }
    }
    out.duals.clear();
    out.recompute_objective(inst);
    Ok(out)
}
