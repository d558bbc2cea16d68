use std::sync::Arc;

use slutsky_forge::demand_model::*;
use slutsky_forge::identification::*;
use slutsky_forge::rotation::{RotationBuilder, SlutskyTarget};
use slutsky_forge::transport::*;

fn cd0_flow() -> CompositeFlow {
    CompositeFlow::new(builtin("cd0").unwrap(), FlowConfig::default()).unwrap()
}

#[test]
fn cd0_functionals_closed_forms() {
    let f = builtin("cd0").unwrap();
    let x = PriceIncome::new(&[1.0, 1.0], 1.0);
    let oracle = estimate_functionals(f.as_ref(), &x, 0, 1e-3, 1, true).unwrap();
    assert!((oracle.t[(0, 1)] - 0.18).abs() < 1e-12);
    assert!((oracle.t[(0, 0)] + 0.413333).abs() < 1e-6);
    let mc = estimate_functionals(f.as_ref(), &x, 20_000, 1e-3, 1, false).unwrap();
    assert_eq!(mc.t, mc.t.transpose());
    let se = mc.t_se.as_ref().unwrap();
    for (i, j, v) in [(0, 1, 0.18), (0, 0, -0.413333)] {
        assert!((mc.t[(i, j)] - v).abs() <= (4.0 * se[(i, j)]).max(1e-2), "T{i}{j} = {}", mc.t[(i, j)]);
    }
    assert!(mc.one_sided.iter().all(|b| *b));
    let x = PriceIncome::new(&[1.5, 1.2], 1.4);
    let t = estimate_functionals(f.as_ref(), &x, 0, 1e-3, 1, true).unwrap().t;
    assert!((t[(0, 1)] - 0.14).abs() < 1e-12);
}

#[test]
fn tilt_mc_functionals_agree_with_quadrature() {
    let f = builtin("tilt").unwrap();
    let x = PriceIncome::new(&[1.1, 1.1], 1.15);
    let oracle = estimate_functionals(f.as_ref(), &x, 0, 1e-3, 1, true).unwrap();
    let mc = estimate_functionals(f.as_ref(), &x, 20_000, 1e-3, 2, false).unwrap();
    let se = mc.t_se.unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((mc.t[(i, j)] - oracle.t[(i, j)]).abs() <= (4.0 * se[(i, j)]).max(1e-3));
        }
    }
}

#[test]
fn cd0_average_slutsky_matches_closed_form() {
    let flow = cd0_flow();
    let x = PriceIncome::new(&[1.0, 1.0], 1.0);
    let s = estimate_average_slutsky(&flow, &x, 10_000, 1e-3, 1e-3, 3).unwrap();
    for (i, j, v) in [(0, 1, 0.09), (0, 0, -0.206667)] {
        assert!((s.s_hat[(i, j)] - v).abs() <= (4.0 * s.s_se[(i, j)]).max(1e-2), "S{i}{j} = {}", s.s_hat[(i, j)]);
    }
    assert!(s.asymmetry[(0, 1)].abs() <= (4.0 * s.asymmetry_se[(0, 1)]).max(1e-2));
    assert!(estimate_average_slutsky(&flow, &x, 10, 1e-3, 1e-3, 3).is_err());
}

#[test]
fn marginal_distance_self_and_negative_control() {
    let flow = cd0_flow();
    let f = flow.family().clone();
    let x = PriceIncome::new(&[1.5, 1.2], 1.4);
    let rep = marginal_distance(&flow, &x, 20_000, 5, false, MarginalThresholds::default()).unwrap();
    assert!(rep.pass, "{rep:?}");
    assert!(rep.ks.iter().all(|k| *k >= 0.0) && rep.energy >= 0.0);
    let bad = marginal_distance(&flow, &x, 20_000, 5, true, MarginalThresholds::default()).unwrap();
    assert!(!bad.pass);
    assert!(bad.ks.iter().any(|k| *k > 0.1), "{:?}", bad.ks);
    // Pushforward against itself.
    let w = reference_sample(f.as_ref(), 500, 9).unwrap();
    let (a, _) = flow.push_samples(&x, &w, false).unwrap();
    let col: Vec<f64> = a.iter().map(|q| q[0]).collect();
    assert_eq!(slutsky_forge::stats::ks_two_sample(&col, &col), 0.0);
    let rows: Vec<Vec<f64>> = a.iter().map(|q| q.to_vec()).collect();
    assert_eq!(slutsky_forge::stats::energy_distance(&rows, &rows, 5000, 1), 0.0);
}

#[test]
fn doubling_n_shrinks_standard_errors() {
    let flow = cd0_flow();
    let x = PriceIncome::new(&[1.25, 1.75], 1.2);
    let a = estimate_average_slutsky(&flow, &x, 10_000, 1e-3, 1e-3, 4).unwrap();
    let b = estimate_average_slutsky(&flow, &x, 20_000, 1e-3, 1e-3, 4).unwrap();
    for (sa, sb) in a.s_se.iter().zip(b.s_se.iter()) {
        let r = sa / sb;
        assert!((1.3..=1.55).contains(&r), "{r}");
    }
}

#[test]
fn corrected_system_hits_the_asymmetric_target() {
    let f = builtin("cd0").unwrap();
    let builder = RotationBuilder::new(f.as_ref(), SlutskyTarget::constant_c12(0.05), 5_000, 2).unwrap();
    let flow = cd0_flow().with_correction(Arc::new(builder));
    let x = PriceIncome::new(&[1.0, 1.0], 1.0);
    let s = estimate_average_slutsky(&flow, &x, 5_000, 1e-3, 1e-3, 3).unwrap();
    let tol = |se: f64| (4.0 * se).max(1e-2);
    assert!((s.s_hat[(0, 1)] - 0.14).abs() <= tol(s.s_se[(0, 1)]), "{}", s.s_hat);
    assert!((s.s_hat[(1, 0)] - 0.04).abs() <= tol(s.s_se[(1, 0)]), "{}", s.s_hat);
    assert!((s.symmetric_sum[(0, 1)] - 0.18).abs() <= tol(s.symmetric_sum_se[(0, 1)]));
}

#[test]
fn zero_shift_systems_coincide() {
    let cfg = NonidConfig { n: 2_000, n_marginal: 5_000, n_coeffs: 2_000, ..NonidConfig::default() };
    let rep = nonid_demo(builtin("cd0").unwrap(), 0.0, &[PriceIncome::new(&[1.5, 1.2], 1.4)], &cfg).unwrap();
    let p = &rep.points[0];
    assert_eq!(p.symmetric.slutsky.s_hat, p.corrected.slutsky.s_hat);
    assert_eq!(p.symmetric.marginals.ks, p.corrected.marginals.ks);
    assert!(rep.pass, "{:?}", rep.failure);
    assert!(nonid_demo(builtin("cd0").unwrap(), 0.2, &[PriceIncome::new(&[1.5, 1.2], 1.4)], &cfg).is_err());
}

#[test]
fn tilt_demo_pass_structure() {
    let cfg = NonidConfig { n: 5_000, n_marginal: 10_000, n_coeffs: 5_000, ..NonidConfig::default() };
    let rep = nonid_demo(builtin("tilt").unwrap(), 0.02, &[PriceIncome::new(&[1.1, 1.1], 1.15)], &cfg).unwrap();
    assert!(rep.pass, "{:?}", rep.failure);
    let p = &rep.points[0];
    assert!(p.equal_marginals && p.distinct_slutsky);
}
