//! Test-only helpers shared by the integration suites.
#![allow(dead_code)]

use gateroute::model::{HardwareProfile, Instance, Pricing, PricingScheme, WorkloadClass};
use gateroute::planner::simplex::RowKind;
use gateroute::planner::LpProblem;

pub fn two_class(scheme: PricingScheme) -> Instance<f64> {
    Instance::new(
        vec![
            WorkloadClass::new(300.0, 1000.0, 0.5, 0.1),
            WorkloadClass::new(3000.0, 400.0, 0.5, 0.1),
        ],
        HardwareProfile::from_affine(16, 256.0, 0.0174, 6.2e-5, 0.0, 45.45),
        Pricing {
            prefill_price: 0.1,
            decode_price: 0.2,
            scheme,
        },
    )
    .unwrap()
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Solves `A z = b` by Gaussian elimination with partial pivoting.
fn solve_square(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let m = b.len();
    for col in 0..m {
        let piv = (col..m).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-11 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..m {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    let (pivot, row) = if r < col {
                        let (lo, hi) = a.split_at_mut(col);
                        (&hi[0], &mut lo[r])
                    } else {
                        let (lo, hi) = a.split_at_mut(r);
                        (&lo[col], &mut hi[0])
                    };
                    for (x, p) in row[col..m].iter_mut().zip(&pivot[col..m]) {
                        *x -= f * p;
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..m).map(|i| b[i] / a[i][i]).collect())
}

fn combinations(n: usize, k: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == k {
            f(cur);
            return;
        }
        for j in start..=(n - (k - cur.len())) {
            cur.push(j);
            rec(j + 1, n, k, cur, f);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f);
}

/// Maximum of the LP by enumerating every basis of `A z = b, z >= 0` (slacks
/// appended for `<=` rows). Returns `None` when no basic solution is feasible.
pub fn vertex_oracle(lp: &LpProblem<f64>) -> Option<(f64, Vec<f64>)> {
    let nv = lp.num_vars();
    let m = lp.rows.len();
    let le: Vec<usize> = (0..m).filter(|&r| lp.rows[r].kind == RowKind::Le).collect();
    let ncols = nv + le.len();
    let mut cols = vec![vec![0.0; m]; ncols];
    for (r, row) in lp.rows.iter().enumerate() {
        for (col, &v) in cols.iter_mut().zip(&row.coeffs[..nv]) {
            col[r] = v;
        }
    }
    for (k, &r) in le.iter().enumerate() {
        cols[nv + k][r] = 1.0;
    }
    let rhs: Vec<f64> = lp.rows.iter().map(|r| r.rhs).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    combinations(ncols, m, &mut |basis| {
        let a: Vec<Vec<f64>> = (0..m).map(|r| basis.iter().map(|&j| cols[j][r]).collect()).collect();
        let Some(z) = solve_square(a, rhs.clone()) else { return };
        if z.iter().any(|&v| v < -1e-9) {
            return;
        }
        let mut x = vec![0.0; nv];
        for (k, &j) in basis.iter().enumerate() {
            if j < nv {
                x[j] = z[k].max(0.0);
            }
        }
        let obj: f64 = x.iter().zip(&lp.objective).map(|(a, b)| a * b).sum();
        if best.as_ref().is_none_or(|(b, _)| obj > *b) {
            best = Some((obj, x));
        }
    });
    best
}

/// A random instance satisfying the zero-decode-buffer condition together
/// with a feasible bundled plan that carries a positive decode buffer.
pub fn random_feasible_plan(
    rng: &mut impl rand::Rng,
) -> (Instance<f64>, gateroute::planner::FluidPlan<f64>) {
    use gateroute::model::derive_rates;
    let ni = rng.random_range(1..=4);
    let b = rng.random_range(2..=32usize);
    let chunk = rng.random_range(64.0..1024.0);
    let alpha = rng.random_range(0.005..0.05);
    let beta = rng.random_range(1e-5..1e-4);
    let tau = alpha + beta * chunk;
    let bound = (b as f64 - 1.0) / b as f64 / tau;
    let gamma = bound * rng.random_range(1.0..3.0);
    let classes: Vec<_> = (0..ni)
        .map(|_| {
            WorkloadClass::new(
                rng.random_range(50.0..5000.0),
                rng.random_range(50.0..2000.0),
                1.0,
                rng.random_range(0.01..1.0),
            )
        })
        .collect();
    let mut inst = Instance::new(
        classes,
        HardwareProfile::from_affine(b, chunk, alpha, beta, 0.0, gamma),
        Pricing {
            prefill_price: rng.random_range(0.0..1.0),
            decode_price: rng.random_range(0.01..1.0),
            scheme: PricingScheme::Bundled,
        },
    )
    .unwrap();
    let rates = derive_rates(&inst);
    let bf = b as f64;
    let mut x: Vec<f64> = (0..ni).map(|_| rng.random_range(0.01..1.0)).collect();
    let total = rng.random_range(0.05..1.0);
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v *= total / s);
    // Split each class's prefill output into mixed completions, solo
    // completions and a positive decode abandonment flow.
    let mut ym = vec![0.0; ni];
    let mut ys = vec![0.0; ni];
    let mut qd = vec![0.0; ni];
    let mut qp = vec![0.0; ni];
    let mixed_cap = (bf - 1.0) * total;
    let solo_cap = bf * (1.0 - total);
    for i in 0..ni {
        let out = rates.prefill[i] * x[i];
        let fm = rng.random_range(0.0..0.6);
        let fs = rng.random_range(0.0..(0.9 - fm));
        ym[i] = fm * out / rates.mixed[i];
        ys[i] = fs * out / rates.solo[i];
    }
    // Scale into capacity; decode completions stay strictly below prefill
    // output so every class keeps a positive buffer.
    let sm: f64 = ym.iter().sum();
    let ss: f64 = ys.iter().sum();
    let km = if sm > mixed_cap { mixed_cap / sm } else { 1.0 };
    let ks = if ss > solo_cap { solo_cap / ss } else { 1.0 };
    for i in 0..ni {
        ym[i] *= km;
        ys[i] *= ks;
        let theta = inst.classes[i].patience_rate;
        let done = rates.mixed[i] * ym[i] + rates.solo[i] * ys[i];
        qd[i] = (rates.prefill[i] * x[i] - done) / theta;
        qp[i] = rng.random_range(0.0..5.0);
        inst.classes[i].arrival_rate = rates.prefill[i] * x[i] + theta * qp[i];
    }
    let mut plan = gateroute::planner::FluidPlan {
        x,
        y_mixed: ym,
        y_solo: ys,
        q_prefill: qp,
        q_decode: qd,
        objective: 0.0,
        scheme: PricingScheme::Bundled,
        sli: Default::default(),
        duals: vec![],
    };
    plan.recompute_objective(&inst);
    (inst, plan)
}

/// Single class with a negligible decode stage, so every GPU behaves as one
/// prefill server of an Erlang-A queue. Rates per GPU: arrivals `load * mu_p`,
/// patience `theta`.
pub fn single_stage(load: f64, theta: f64) -> (Instance<f64>, gateroute::planner::FluidPlan<f64>) {
    let hw = HardwareProfile::from_affine(2, 256.0, 0.0174, 6.2e-5, 0.0, 45.45);
    // Prompt length chosen so the prefill rate is 1 per second.
    let prompt = 256.0 / hw.tau();
    let inst = Instance::new(
        vec![WorkloadClass::new(prompt, 1e-4, load, theta)],
        hw,
        Pricing {
            prefill_price: 0.1,
            decode_price: 0.2,
            scheme: PricingScheme::Bundled,
        },
    )
    .unwrap();
    let plan = gateroute::planner::FluidPlan {
        x: vec![1.0],
        y_mixed: vec![0.0],
        y_solo: vec![0.0],
        q_prefill: vec![0.0],
        q_decode: vec![0.0],
        objective: 0.0,
        scheme: PricingScheme::Bundled,
        sli: gateroute::planner::SliSpec::none(),
        duals: vec![],
    };
    (inst, plan)
}

/// Stationary mean number in service and waiting for the M/M/n+M queue with
/// total arrival rate `arrival`, service rate `mu`, abandonment rate `theta`,
/// from the birth-death balance equations.
pub fn erlang_a_means(n: usize, arrival: f64, mu: f64, theta: f64) -> (f64, f64) {
    let mut p = 1.0f64;
    let (mut z, mut busy, mut wait) = (1.0, 0.0, 0.0);
    let mut k = 0usize;
    loop {
        k += 1;
        let death = (k.min(n)) as f64 * mu + (k.saturating_sub(n)) as f64 * theta;
        p *= arrival / death;
        z += p;
        busy += p * k.min(n) as f64;
        wait += p * k.saturating_sub(n) as f64;
        if k > n && p < 1e-18 * z {
            break;
        }
    }
    (busy / z, wait / z)
}
