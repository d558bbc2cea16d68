use std::f64::consts::PI;

use proptest::prelude::*;
use slutsky_forge::elliptic::*;

fn cosine_error(kind: Manufactured, n: usize) -> f64 {
    let prob = kind.problem(n).unwrap();
    let sol = solve_neumann(&prob, 1e-8).unwrap();
    let exact = prob.grid().from_fn(|z| kind.exact(z));
    sol.u.values.iter().zip(&exact.values).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
}

#[test]
fn cosine_at_65_within_tolerance() {
    assert!(cosine_error(Manufactured::Cosine, 65) <= 2e-3);
}

#[test]
fn anisotropic_at_65_within_tolerance() {
    assert!(cosine_error(Manufactured::Anisotropic, 65) <= 2e-3);
}

#[test]
fn cross_term_at_65_within_tolerance() {
    assert!(cosine_error(Manufactured::CrossTerm, 65) <= 2e-3);
}

#[test]
fn zero_rhs_gives_zero_solution() {
    let prob = Manufactured::Zero.problem(33).unwrap();
    let sol = solve_neumann(&prob, 1e-8).unwrap();
    assert!(sol.u.values.iter().all(|v| *v == 0.0));
    let g = grad_field(&sol.u);
    assert!(g.field.is_zero());
    let rep = convergence_check(Manufactured::Zero, &[17, 33, 65], 1e-8).unwrap();
    assert_eq!(rep.order_label(), "exact");
}

#[test]
fn second_order_convergence() {
    for kind in [Manufactured::Cosine, Manufactured::Anisotropic, Manufactured::CrossTerm] {
        let rep = convergence_check(kind, &[33, 65, 129], 1e-10).unwrap();
        let order = rep.order.unwrap();
        assert!((1.8..=2.2).contains(&order), "{kind:?}: order {order}");
    }
}

#[test]
fn too_few_sizes_is_a_config_error() {
    assert!(convergence_check(Manufactured::Cosine, &[33, 65], 1e-8).is_err());
}

#[test]
fn solution_invariants() {
    let prob = Manufactured::CrossTerm.problem(65).unwrap();
    let tol = 1e-8;
    let sol = solve_neumann(&prob, tol).unwrap();
    assert!(sol.u.weighted_mean().abs() <= 1e-14);
    assert!(sol.relative_residual <= tol);
    let grad = grad_field(&sol.u).field.max_norm();
    assert!(sol.boundary_flux <= 10.0 * tol * grad, "flux {}", sol.boundary_flux);
}

#[test]
fn gradient_of_linear_field_is_exact() {
    let g = Grid2D::unit(17).unwrap();
    let u = g.from_fn(|z| z[0]);
    let grad = grad_field(&u);
    for v in &grad.field.values {
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
    }
}

#[test]
fn gradient_of_cosine_is_second_order() {
    let g = Grid2D::unit(65).unwrap();
    let u = g.from_fn(|z| (PI * z[0]).cos() * (PI * z[1]).cos());
    let grad = grad_field(&u);
    let mut err: f64 = 0.0;
    for (z, v) in g.nodes().zip(&grad.field.values) {
        let ex = [-PI * (PI * z[0]).sin() * (PI * z[1]).cos(), -PI * (PI * z[0]).cos() * (PI * z[1]).sin()];
        err = err.max((v[0] - ex[0]).abs()).max((v[1] - ex[1]).abs());
    }
    assert!(err <= 5e-3, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn operator_is_symmetric_in_the_weighted_inner_product(seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let prob = Manufactured::CrossTerm.problem(33).unwrap();
        let g = prob.grid();
        let u: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let v: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let w = g.weights();
        let lu = apply_operator(g, &prob.coefficient, &u);
        let lv = apply_operator(g, &prob.coefficient, &v);
        let a: f64 = lu.iter().zip(&v).zip(&w).map(|((x, y), w)| x * y * w).sum();
        let b: f64 = u.iter().zip(&lv).zip(&w).map(|((x, y), w)| x * y * w).sum();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}
