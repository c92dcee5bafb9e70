mod common;

use common::{erlang_a_means, rel, single_stage, two_class};
use gateroute::model::{PricingScheme, WorkloadClass};
use gateroute::planner::{plan, SliSpec};
use gateroute::policy::PolicyKind;
use gateroute::sim::{revenue_accrue, run, run_checked, weighted_class_choice, SimConfig, SimError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn no_arrivals_no_revenue() {
    let mut inst = two_class(PricingScheme::Bundled);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    for c in &mut inst.classes {
        c.arrival_rate = 0.0;
    }
    let m = run(&inst, Some(&p), PolicyKind::GgSp, &SimConfig::new(10, 100.0, 1)).unwrap();
    assert_eq!(m.rev_per_gpu, 0.0);
    assert_eq!(m.events, 0);
    for c in &m.classes {
        assert_eq!(c.x_occ + c.ym_occ + c.ys_occ + c.qp_scaled + c.qd_scaled, 0.0);
    }
}

#[test]
fn planned_policies_need_a_plan() {
    let inst = two_class(PricingScheme::Bundled);
    let cfg = SimConfig::new(5, 50.0, 1);
    for policy in PolicyKind::ALL {
        let r = run(&inst, None, policy, &cfg);
        if policy.needs_plan() {
            assert!(matches!(r, Err(SimError::PlanMissing(p)) if p == policy));
        } else {
            assert!(r.is_ok());
        }
    }
}

#[test]
fn invalid_configs_rejected() {
    let inst = two_class(PricingScheme::Bundled);
    for cfg in [
        SimConfig::new(0, 10.0, 1),
        SimConfig::new(5, 0.0, 1),
        SimConfig { warmup: 1.0, ..SimConfig::new(5, 10.0, 1) },
    ] {
        assert!(matches!(run(&inst, None, PolicyKind::FiWsp, &cfg), Err(SimError::InvalidConfig(_))));
    }
}

#[test]
fn audited_runs_of_every_policy() {
    for scheme in [PricingScheme::Bundled, PricingScheme::Separate] {
        let inst = two_class(scheme);
        let p = plan(&inst, &SliSpec::none()).unwrap();
        for policy in PolicyKind::ALL {
            let cfg = SimConfig {
                audit: true,
                ..SimConfig::new(12, 150.0, 3)
            };
            let m = run(&inst, Some(&p), policy, &cfg).unwrap_or_else(|e| panic!("{policy}: {e}"));
            assert!(m.events > 1000);
            assert!(m.rev_per_gpu > 0.0, "{policy}");
            assert!(m.tpot_avg >= inst.hardware.tau_solo() - 1e-12 && m.tpot_avg <= inst.hardware.tau() + 1e-12);
        }
    }
}

#[test]
fn identical_seeds_are_bit_identical() {
    let inst = two_class(PricingScheme::Separate);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let cfg = SimConfig::new(30, 200.0, 42);
    for policy in [PolicyKind::SliAwareGeneral, PolicyKind::GfWsp] {
        let a = run_checked(&inst, Some(&p), policy, &cfg).unwrap();
        let b = run(&inst, Some(&p), policy, &SimConfig { seed: 43, ..cfg.clone() }).unwrap();
        assert_ne!(a, b);
    }
}

#[test]
fn policies_share_the_arrival_stream() {
    let inst = two_class(PricingScheme::Bundled);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let cfg = SimConfig::new(20, 200.0, 9);
    let arrivals: Vec<Vec<u64>> = PolicyKind::ALL
        .iter()
        .map(|&k| run(&inst, Some(&p), k, &cfg).unwrap().classes.iter().map(|c| c.arrivals).collect())
        .collect();
    assert!(arrivals.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn solo_only_class_never_decodes_in_mixed_mode() {
    let inst = two_class(PricingScheme::Separate);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let params = gateroute::planner::derive_policy_params(&p, 50, &inst);
    assert_eq!(params.solo_probs[0], 1.0);
    let m = run(&inst, Some(&p), PolicyKind::SliAware, &SimConfig::new(50, 300.0, 2)).unwrap();
    assert_eq!(m.classes[0].ym_occ, 0.0);
    assert!(m.classes[0].ys_occ > 0.0);
}

#[test]
fn weighted_buffer_choice_frequency() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 100_000;
    let hits = (0..draws)
        .filter(|_| weighted_class_choice(&[0.7, 0.3], &[true, true], rng.random::<f64>()) == Some(0))
        .count();
    let freq = hits as f64 / draws as f64;
    assert!((freq - 0.7).abs() < 0.01, "{freq}");
}

#[test]
fn revenue_examples() {
    let bundled = two_class(PricingScheme::Bundled);
    let separate = two_class(PricingScheme::Separate);
    assert!((revenue_accrue(&bundled, &[1, 0], &[1, 0]) - 230.0).abs() < 1e-9);
    // Abandoned while waiting for decode: only the prefill is paid for.
    assert_eq!(revenue_accrue(&bundled, &[1, 0], &[0, 0]), 0.0);
    assert!((revenue_accrue(&separate, &[1, 0], &[0, 0]) - 30.0).abs() < 1e-9);
    assert_eq!(revenue_accrue(&separate, &[0, 0], &[0, 0]), 0.0);
}

#[test]
fn window_revenue_matches_completion_counts() {
    let inst = two_class(PricingScheme::Bundled);
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let m = run(&inst, Some(&p), PolicyKind::GgSp, &SimConfig::new(20, 300.0, 4)).unwrap();
    let pd: Vec<u64> = m.classes.iter().map(|c| c.prefill_done).collect();
    let dd: Vec<u64> = m.classes.iter().map(|c| c.decode_done).collect();
    let want = revenue_accrue(&inst, &pd, &dd) / (m.window * m.n as f64);
    assert!(rel(m.rev_per_gpu, want) < 1e-12);
}

#[test]
fn erlang_a_engine_oracle() {
    let n = 100;
    for (load, theta) in [(0.9, 0.5), (1.2, 0.3)] {
        let (inst, p) = single_stage(load, theta);
        let mu = gateroute::model::derive_rates(&inst).prefill[0];
        assert!(rel(mu, 1.0) < 1e-12);
        let (busy, wait) = erlang_a_means(n, load * n as f64, mu, theta);
        let seeds = 10;
        let (mut x, mut q) = (0.0, 0.0);
        for seed in 0..seeds {
            let m = run(&inst, Some(&p), PolicyKind::GgSp, &SimConfig::new(n, 600.0, seed)).unwrap();
            assert_eq!(m.mixed_gpus, n);
            x += m.classes[0].x_occ / seeds as f64;
            q += m.classes[0].qp_scaled / seeds as f64;
        }
        let nf = n as f64;
        assert!(rel(x, busy / nf) < 0.02, "busy {x} vs {}", busy / nf);
        if wait / nf > 0.05 {
            assert!(rel(q, wait / nf) < 0.05, "queue {q} vs {}", wait / nf);
        }
    }
}

#[test]
fn zero_patience_class_is_never_abandoned() {
    let mut inst = two_class(PricingScheme::Bundled);
    inst.classes[1] = WorkloadClass {
        patience_rate: 0.0,
        ..inst.classes[1].clone()
    };
    let p = plan(&inst, &SliSpec::none()).unwrap();
    let m = run(&inst, Some(&p), PolicyKind::GgSp, &SimConfig::new(10, 200.0, 1)).unwrap();
    assert_eq!(m.classes[1].prefill_abandoned + m.classes[1].decode_abandoned, 0);
}
