mod common;

use common::{random_feasible_plan, rel, two_class, vertex_oracle};
use gateroute::model::{derive_rates, HardwareProfile, Instance, Pricing, PricingScheme, WorkloadClass};
use gateroute::planner::simplex::RowKind;
use gateroute::planner::{
    build_lp, derive_policy_params, eliminate_decode_buffer, plan, plan_with_scheme, solve_lp, sweep_frontier,
    FluidPlan, FrontierAxis, PlanError, SliSpec, SliTerm,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn base_lp_shape() {
    let inst = two_class(PricingScheme::Bundled);
    let lp = build_lp(&inst, &SliSpec::none(), PricingScheme::Bundled).unwrap();
    assert_eq!(lp.num_vars(), 10);
    assert_eq!(lp.count_rows(RowKind::Le), 3);
    assert_eq!(lp.count_rows(RowKind::Eq), 4);

    let sli = SliSpec {
        prefill_fairness: Some(SliTerm::Hard(0.1)),
        ..SliSpec::none()
    };
    let lp = build_lp(&inst, &sli, PricingScheme::Bundled).unwrap();
    assert_eq!(lp.count_rows(RowKind::Le), 5);
    assert_eq!(lp.num_vars(), 10);

    let sli = SliSpec {
        prefill_fairness: Some(SliTerm::Penalty(1.0)),
        ..SliSpec::none()
    };
    let lp = build_lp(&inst, &sli, PricingScheme::Bundled).unwrap();
    assert_eq!(lp.num_vars(), 11);
}

#[test]
fn tpot_row_squeezes_prefill_to_zero() {
    let inst = two_class(PricingScheme::Separate);
    let g = inst.hardware.gamma();
    for eps in [1e-3, 1e-5, 1e-7] {
        let sli = SliSpec {
            tpot: Some(SliTerm::Hard(1.0 / g + eps)),
            ..SliSpec::none()
        };
        let lp = build_lp(&inst, &sli, PricingScheme::Separate).unwrap();
        let row = lp.rows.last().unwrap();
        // coefficient * S <= rhs gives the largest feasible total occupancy.
        let s_max = row.rhs / row.coeffs[0];
        assert!(s_max > 0.0 && s_max < 200.0 * eps, "eps {eps}: s_max {s_max}");
    }
}

#[test]
fn two_class_matches_vertex_oracle() {
    for scheme in [PricingScheme::Bundled, PricingScheme::Separate] {
        let inst = two_class(scheme);
        let lp = build_lp(&inst, &SliSpec::none(), scheme).unwrap();
        let p = solve_lp(&lp).unwrap();
        let (best, _) = vertex_oracle(&lp).unwrap();
        assert!(rel(p.objective, best) < 1e-9, "{scheme}: {} vs {best}", p.objective);
        assert!(p.max_residual(&inst) <= 1e-7);
    }
}

#[test]
fn separate_optimum_is_flow_limited() {
    // Both classes fit in prefill capacity, so the planner serves all arrivals
    // and leaves a decode backlog that abandonment clears.
    let inst = two_class(PricingScheme::Separate);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let r = derive_rates(&inst);
    for i in 0..2 {
        assert!(rel(p.x[i], 0.5 / r.prefill[i]) < 1e-9);
        assert!(p.q_prefill[i].abs() < 1e-9);
    }
    assert!(p.q_decode.iter().sum::<f64>() > 0.0);
}

#[test]
fn zero_arrivals_zero_objective() {
    let mut inst = two_class(PricingScheme::Bundled);
    for c in &mut inst.classes {
        c.arrival_rate = 0.0;
    }
    let p = plan(&inst, &SliSpec::none()).unwrap();
    assert_eq!(p.objective, 0.0);
    assert!(p.x.iter().chain(&p.y_mixed).chain(&p.y_solo).all(|&v| v == 0.0));
}

#[test]
fn single_class_without_patience() {
    let inst = Instance::new(
        vec![WorkloadClass::new(300.0, 1000.0, 0.5, 0.0)],
        HardwareProfile::from_affine(16, 256.0, 0.0174, 6.2e-5, 0.0, 45.45),
        Pricing {
            prefill_price: 0.1,
            decode_price: 0.2,
            scheme: PricingScheme::Bundled,
        },
    )
    .unwrap();
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let mu_p = derive_rates(&inst).prefill[0];
    assert!(rel(p.x[0], 0.5 / mu_p) < 1e-12);
    assert_eq!(p.q_prefill[0], 0.0);
}

#[test]
fn impatient_overload_is_infeasible() {
    let mut inst = two_class(PricingScheme::Bundled);
    inst.classes[1].patience_rate = 0.0;
    inst.classes[1].arrival_rate = 5.0;
    match plan(&inst, &SliSpec::none()) {
        Err(PlanError::Infeasible(msg)) => assert!(msg.contains("zero patience"), "{msg}"),
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn bundled_objective_recomputed_from_fields() {
    let inst = two_class(PricingScheme::Bundled);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let r = derive_rates(&inst);
    let w = inst.request_values();
    let direct: f64 = (0..2)
        .map(|i| w[i] * (r.mixed[i] * p.y_mixed[i] + r.solo[i] * p.y_solo[i]))
        .sum();
    assert!(rel(p.objective, direct) < 1e-12);
}

#[test]
fn relabeling_equal_classes_is_invariant() {
    let mut inst = two_class(PricingScheme::Separate);
    inst.classes.push(inst.classes[0].clone());
    let inst = Instance::new(inst.classes, inst.hardware, inst.pricing).unwrap();
    let mut swapped = inst.clone();
    swapped.classes.swap(0, 2);
    let swapped = Instance::new(swapped.classes, swapped.hardware, swapped.pricing).unwrap();
    let a = plan(&inst, &SliSpec::none()).unwrap();
    let b = plan(&swapped, &SliSpec::none()).unwrap();
    assert!(rel(a.objective, b.objective) < 1e-12);
}

#[test]
fn f32_plan_tracks_f64() {
    let inst = two_class(PricingScheme::Separate);
    let text = inst.to_json();
    let inst32: Instance<f32> = Instance::from_json(&text).unwrap();
    let p64 = plan(&inst, &SliSpec::none()).unwrap();
    let p32 = plan(&inst32, &SliSpec::none()).unwrap();
    assert!(rel(p32.objective as f64, p64.objective) < 1e-3);
}

#[test]
fn sli_penalties_match_oracle() {
    let inst = two_class(PricingScheme::Bundled);
    for sli in [
        SliSpec {
            prefill_fairness: Some(SliTerm::Penalty(50.0)),
            ..SliSpec::none()
        },
        SliSpec {
            decode_fairness: Some(SliTerm::Penalty(5.0)),
            ..SliSpec::none()
        },
        SliSpec {
            prefill_fairness: Some(SliTerm::Hard(0.01)),
            decode_fairness: Some(SliTerm::Hard(2.0)),
            ..SliSpec::none()
        },
    ] {
        let lp = build_lp(&inst, &sli, PricingScheme::Bundled).unwrap();
        let p = solve_lp(&lp).unwrap();
        let (best, _) = vertex_oracle(&lp).unwrap();
        assert!((p.objective - best).abs() < 1e-9 * best.abs().max(1.0), "{sli:?}");
    }
}

#[test]
fn tpot_penalty_epigraph_is_tight() {
    let inst = two_class(PricingScheme::Separate);
    let sli = SliSpec {
        tpot: Some(SliTerm::Penalty(500.0)),
        ..SliSpec::none()
    };
    let lp = build_lp(&inst, &sli, PricingScheme::Separate).unwrap();
    let p = solve_lp(&lp).unwrap();
    let sol = gateroute::planner::simplex::solve(&lp.standard_form()).unwrap();
    // Penalized objective from the true convex TPOT is within the tangent gap.
    assert!((sol.objective - p.objective).abs() < 1e-4 * p.objective.abs().max(1.0));
    let unpenalized = plan(&inst, &SliSpec::none()).unwrap();
    assert!(p.total_prefill() <= unpenalized.total_prefill() + 1e-12);
}

#[test]
fn tpot_penalty_rejects_fast_mixed_iterations() {
    let mut inst = two_class(PricingScheme::Separate);
    inst.hardware.solo_rate = 10.0; // gamma * tau < 1
    let sli = SliSpec {
        tpot: Some(SliTerm::Penalty(1.0)),
        ..SliSpec::none()
    };
    assert!(matches!(
        build_lp(&inst, &sli, PricingScheme::Separate),
        Err(PlanError::NonConvexPenalty { .. })
    ));
}

#[test]
fn invalid_sli_rejected() {
    let inst = two_class(PricingScheme::Separate);
    let sli = SliSpec {
        tpot: Some(SliTerm::Hard(0.0)),
        ..SliSpec::none()
    };
    assert!(matches!(plan(&inst, &sli), Err(PlanError::InvalidSli(_))));
}

#[test]
fn sli_json_roundtrip() {
    let text = r#"{"prefill_fairness":{"hard":0.05},"decode_fairness":{"penalty":2.0},"tpot":{"hard":0.03},"force_zero_decode_buffer":true}"#;
    let sli: SliSpec<f64> = serde_json::from_str(text).unwrap();
    assert_eq!(sli.prefill_fairness, Some(SliTerm::Hard(0.05)));
    assert_eq!(sli.decode_fairness, Some(SliTerm::Penalty(2.0)));
    assert!(sli.force_zero_decode_buffer);
    let back: SliSpec<f64> = serde_json::from_str(&serde_json::to_string(&sli).unwrap()).unwrap();
    assert_eq!(back, sli);
}

#[test]
fn shadow_prices_match_finite_differences() {
    let inst = two_class(PricingScheme::Separate);
    let eta_of = |axis: FrontierAxis| match axis {
        FrontierAxis::Tpot => 0.026,
        FrontierAxis::PrefillFairness => 0.05,
        FrontierAxis::DecodeFairness => 0.5,
    };
    for axis in FrontierAxis::ALL {
        let eta = eta_of(axis);
        let h = 1e-6 * eta;
        let base = plan(&inst, &axis.apply(&SliSpec::none(), eta)).unwrap();
        let up = plan(&inst, &axis.apply(&SliSpec::none(), eta + h)).unwrap();
        let down = plan(&inst, &axis.apply(&SliSpec::none(), eta - h)).unwrap();
        let fd = (up.objective - down.objective) / (2.0 * h);
        let sp = base.shadow_price(axis, &inst).unwrap();
        assert!((sp - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{axis}: dual {sp} vs fd {fd}");
    }
}

#[test]
fn frontier_facts() {
    let inst = two_class(PricingScheme::Separate);
    let unconstrained = plan(&inst, &SliSpec::none()).unwrap().objective;
    let grid: Vec<f64> = (0..=20).map(|k| 0.020 + 0.0005 * k as f64).collect();
    let pts = sweep_frontier(&inst, FrontierAxis::Tpot, &grid, PricingScheme::Separate, &SliSpec::none()).unwrap();
    for p in &pts {
        assert_eq!(p.feasible, p.eta >= 1.0 / 45.45, "eta {}", p.eta);
    }
    let grid: Vec<f64> = (1..=20).map(|k| k as f64 * 0.05).collect();
    let pts = sweep_frontier(
        &inst,
        FrontierAxis::PrefillFairness,
        &grid,
        PricingScheme::Separate,
        &SliSpec::none(),
    )
    .unwrap();
    assert!(rel(pts.last().unwrap().objective.unwrap(), unconstrained) < 1e-9);
    for w in pts.windows(2) {
        assert!(w[0].objective.unwrap() <= w[1].objective.unwrap() + 1e-9);
    }
}

#[test]
fn elimination_fixpoint_and_errors() {
    let inst = two_class(PricingScheme::Bundled);
    let p = plan(&inst, &SliSpec::zero_decode_buffer()).unwrap();
    assert_eq!(eliminate_decode_buffer(&p, &inst).unwrap(), p);

    let mut slow = inst.clone();
    slow.hardware.solo_rate = 1.0;
    assert!(matches!(
        eliminate_decode_buffer(&p, &slow),
        Err(PlanError::ConditionViolated { .. })
    ));

    let sep = two_class(PricingScheme::Separate);
    let ps = plan(&sep, &SliSpec::none()).unwrap();
    assert!(matches!(
        eliminate_decode_buffer(&ps, &sep),
        Err(PlanError::UnsupportedPlan(_))
    ));
}

fn assert_eliminated(inst: &Instance<f64>, before: &FluidPlan<f64>) -> FluidPlan<f64> {
    let after = eliminate_decode_buffer(before, inst).unwrap();
    assert!(after.q_decode.iter().all(|&q| q == 0.0));
    assert!(after.max_residual(inst) <= 1e-7, "residual {}", after.max_residual(inst));
    assert!(
        (after.objective - before.objective).abs() <= 1e-9 * before.objective.abs().max(1.0),
        "{} vs {}",
        after.objective,
        before.objective
    );
    assert_eq!(eliminate_decode_buffer(&after, inst).unwrap(), after);
    after
}

#[test]
fn elimination_repairs_mixed_capacity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut repaired = 0;
    for _ in 0..200 {
        let (inst, before) = random_feasible_plan(&mut rng);
        let b = inst.hardware.batch_cap as f64;
        let tight = before.y_mixed.iter().sum::<f64>() >= (b - 1.0) * before.total_prefill() * (1.0 - 1e-12);
        let after = assert_eliminated(&inst, &before);
        if tight {
            let sym: f64 = after.y_mixed.iter().sum();
            assert!((sym - (b - 1.0) * after.total_prefill()).abs() < 1e-9 * sym.max(1.0));
            repaired += 1;
        }
    }
    assert!(repaired > 20, "repair path exercised only {repaired} times");
}

#[test]
fn policy_params_examples() {
    let inst = two_class(PricingScheme::Bundled);
    let mut p = plan(&inst, &SliSpec::zero_decode_buffer()).unwrap();
    p.x = vec![0.15, 0.25];
    assert_eq!(derive_policy_params(&p, 500, &inst).mixed_gpus, 200);
    p.y_mixed[0] = 0.0;
    p.y_solo[0] = 1.0;
    assert_eq!(derive_policy_params(&p, 500, &inst).solo_probs[0], 1.0);

    let p = plan(&inst, &SliSpec::none()).unwrap();
    let params = derive_policy_params(&p, 500, &inst);
    let r = derive_rates(&inst);
    for i in 0..2 {
        let m = r.mixed[i] * p.y_mixed[i];
        let s = r.solo[i] * p.y_solo[i];
        let want = if m + s > 0.0 { s / (m + s) } else { 1.0 };
        assert!((params.solo_probs[i] - want).abs() < 1e-15);
        assert!(rel(params.priority_index[i], inst.classes[i].decode_len / inst.classes[i].prompt_len) < 1e-15);
        assert!((params.pool_queue_mixed[i] + params.pool_queue_solo[i] - p.q_decode[i]).abs() < 1e-15);
    }
    for w in [&params.pool_weights_mixed, &params.pool_weights_solo] {
        let s: f64 = w.iter().sum();
        assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn pricing_homogeneity() {
    let inst = two_class(PricingScheme::Separate);
    let base = plan(&inst, &SliSpec::none()).unwrap().objective;
    let mut scaled = inst.clone();
    scaled.pricing.prefill_price *= 10.0;
    scaled.pricing.decode_price *= 10.0;
    let r = plan(&scaled, &SliSpec::none()).unwrap().objective;
    assert!(rel(r, 10.0 * base) < 1e-9);
}

fn arb_instance() -> impl Strategy<Value = Instance<f64>> {
    (
        prop::collection::vec((50.0..5000.0f64, 50.0..2000.0f64, 0.0..2.0f64, 0.01..1.0f64), 1..=3),
        2usize..=32,
        0.005..0.05f64,
        1e-5..1e-4f64,
        5.0..80.0f64,
        0.0..1.0f64,
        0.01..1.0f64,
        any::<bool>(),
    )
        .prop_map(|(cls, b, alpha, beta, gamma, cp, cd, sep)| {
            Instance::new(
                cls.into_iter().map(|(p, d, l, t)| WorkloadClass::new(p, d, l, t)).collect(),
                HardwareProfile::from_affine(b, 256.0, alpha, beta, 0.0, gamma),
                Pricing {
                    prefill_price: cp,
                    decode_price: cd,
                    scheme: if sep { PricingScheme::Separate } else { PricingScheme::Bundled },
                },
            )
            .unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn simplex_agrees_with_vertex_enumeration(inst in arb_instance()) {
        let lp = build_lp(&inst, &SliSpec::none(), inst.pricing.scheme).unwrap();
        let p = solve_lp(&lp).unwrap();
        let (best, _) = vertex_oracle(&lp).unwrap();
        prop_assert!((p.objective - best).abs() <= 1e-8 * best.abs().max(1e-3), "{} vs {}", p.objective, best);
        prop_assert!(p.max_residual(&inst) <= 1e-7);
        prop_assert!(p.total_prefill() <= 1.0 + 1e-9);
    }

    #[test]
    fn optimum_nonincreasing_as_fairness_tightens(inst in arb_instance(), eta in 0.001..0.5f64) {
        let loose = plan_with_scheme(&inst, &FrontierAxis::PrefillFairness.apply(&SliSpec::none(), 2.0 * eta), inst.pricing.scheme);
        let tight = plan_with_scheme(&inst, &FrontierAxis::PrefillFairness.apply(&SliSpec::none(), eta), inst.pricing.scheme);
        if let (Ok(l), Ok(t)) = (loose, tight) {
            prop_assert!(t.objective <= l.objective + 1e-9 * l.objective.abs().max(1.0));
        }
    }

    #[test]
    fn optimal_bundled_plans_eliminate(inst in arb_instance()) {
        let inst = inst.with_scheme(PricingScheme::Bundled);
        prop_assume!(gateroute::model::prop1_condition(&inst));
        let p = plan(&inst, &SliSpec::none()).unwrap();
        let e = eliminate_decode_buffer(&p, &inst).unwrap();
        prop_assert!(e.max_residual(&inst) <= 1e-7);
        prop_assert!((e.objective - p.objective).abs() <= 1e-9 * p.objective.abs().max(1.0));
    }
}
