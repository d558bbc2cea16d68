use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use slutsky_forge::demand_model::*;
use slutsky_forge::rotation::*;
use slutsky_forge::stats::ks_two_sample;
use slutsky_forge::transport::*;

fn a12(c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.0, c, -c, 0.0])
}

fn cd0() -> Arc<dyn DemandFamily> {
    builtin("cd0").unwrap()
}

#[test]
fn bump_eval_peak_and_support() {
    let f = cd0();
    let b = BumpFunction::standard(&f.reference_support()).unwrap();
    let x = PriceIncome::new(&[1.5, 1.2], 1.4);
    let mut peak = [0.0; 2];
    f.forward(x.coords(), b.center(), &mut peak);
    let (v, g) = bump_eval(&b, f.as_ref(), &x, &peak);
    assert!(v > 0.0);
    assert!(g.iter().all(|gi| gi.abs() < 1e-9), "{g:?}");
    let support = f.support(x.coords());
    let (v, g) = bump_eval(&b, f.as_ref(), &x, support.lower());
    assert_eq!((v, g), (0.0, vec![0.0, 0.0]));
}

#[test]
fn bump_integrates_to_one_after_change_of_variables() {
    let f = cd0();
    let b = BumpFunction::standard(&f.reference_support()).unwrap();
    let x = PriceIncome::new(&[1.5, 1.2], 1.4);
    let s = f.support(x.coords());
    let m = 512;
    let h = [s.width(0) / m as f64, s.width(1) / m as f64];
    let mut total = 0.0;
    let mut omega = [0.0; 2];
    let mut jac = [0.0; 4];
    for j in 0..m {
        for i in 0..m {
            let q = [s.lower()[0] + (i as f64 + 0.5) * h[0], s.lower()[1] + (j as f64 + 0.5) * h[1]];
            let (v, _) = bump_eval(&b, f.as_ref(), &x, &q);
            if v == 0.0 {
                continue;
            }
            f.inverse(x.coords(), &q, &mut omega);
            f.jacobian(x.coords(), &omega, &mut jac);
            total += v / (jac[0] * jac[3] - jac[1] * jac[2]).abs();
        }
    }
    total *= h[0] * h[1];
    assert!((total - 1.0).abs() < 1e-4, "{total}");
}

#[test]
fn cd0_coefficients_match_closed_form() {
    let f = cd0();
    let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[1.0, 1.0], 1.0);
    let zero = compute_coeffs(f.as_ref(), &SlutskyTarget::symmetric(2), &flow, &x, 20_000, 3).unwrap();
    assert!(zero.a.iter().all(|v| *v == 0.0), "{}", zero.a);
    let shifted = compute_coeffs(f.as_ref(), &SlutskyTarget::constant_c12(0.05), &flow, &x, 20_000, 3).unwrap();
    assert!((shifted.a[(0, 1)] - 0.05).abs() < 1e-12);
    assert_eq!(shifted.a[(1, 0)], -shifted.a[(0, 1)]);
    assert!(shifted.worst_defect_ratio() <= 5.0);
}

#[test]
fn tilt_diagonal_and_defects_within_five_se() {
    let f = builtin("tilt").unwrap();
    let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[1.1, 1.1], 1.15);
    let co = compute_coeffs(f.as_ref(), &SlutskyTarget::constant_c12(0.03), &flow, &x, 10_000, 8).unwrap();
    for i in 0..2 {
        assert!(co.raw[(i, i)].abs() <= 5.0 * co.raw_se[(i, i)] + 1e-12);
    }
    assert!(co.worst_defect_ratio() <= 5.0);
    // Along-the-leg estimates agree with the pointwise ones at a knot.
    let along = compute_coeffs_along(f.as_ref(), &SlutskyTarget::constant_c12(0.03), &flow, &[1.1, 1.1], 2_000, 8).unwrap();
    let knot = &along[8];
    let direct = compute_coeffs(f.as_ref(), &SlutskyTarget::constant_c12(0.03), &flow, &knot.x, 2_000, 8).unwrap();
    assert!((knot.a[(0, 1)] - direct.a[(0, 1)]).abs() < 1e-12);
}

#[test]
fn rotation_field_support_and_zero_coefficients() {
    let f = cd0();
    let b = BumpFunction::standard(&f.reference_support()).unwrap();
    let x = PriceIncome::new(&[1.2, 1.6], 1.3);
    let mut c = [0.0; 2];
    f.forward(x.coords(), &[0.31, 0.29], &mut c);
    assert_eq!(rotation_field(&a12(0.0), &b, f.as_ref(), &x, 1.0, &c).unwrap(), vec![0.0, 0.0]);
    let s = f.support(x.coords());
    assert_eq!(rotation_field(&a12(0.05), &b, f.as_ref(), &x, 1.0, s.upper()).unwrap(), vec![0.0, 0.0]);
    assert!(rotation_field(&a12(0.05), &b, f.as_ref(), &x, 1.0, &c).unwrap().iter().any(|v| *v != 0.0));
}

#[test]
fn moment_identity_and_divergence() {
    let a = a12(0.05);
    for name in ["cd0", "tilt"] {
        let f = builtin(name).unwrap();
        let b = BumpFunction::standard(&f.reference_support()).unwrap();
        let x = if name == "cd0" { PriceIncome::new(&[1.0, 1.0], 1.0) } else { PriceIncome::new(&[1.05, 1.15], 1.1) };
        let (est, se) = moment_identity(&a, &b, f.as_ref(), &x, 100_000, 17).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let tol = (4.0 * se[(i, j)]).max(1e-3);
                assert!((est[(i, j)] - a[(i, j)]).abs() <= tol, "{name} ({i},{j}): {} vs {}", est[(i, j)], a[(i, j)]);
            }
        }
        let div = weighted_divergence(&a, &b, f.as_ref(), &x, 257).unwrap();
        assert!(div.relative_divergence <= 1e-2, "{name}: {div:?}");
        assert_eq!(div.boundary_max, 0.0);
    }
}

#[test]
fn zero_target_on_cd0_leaves_the_flow_unchanged() {
    let f = cd0();
    let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let builder = RotationBuilder::new(f.as_ref(), SlutskyTarget::symmetric(2), 5_000, 1).unwrap();
    let corrected = flow.with_correction(Arc::new(builder));
    let omegas = reference_sample(f.as_ref(), 200, 4).unwrap();
    for x in [PriceIncome::new(&[1.5, 1.2], 1.4), PriceIncome::new(&[1.8, 1.3], 1.1)] {
        assert!(!corrected.prepare(&x).unwrap().is_corrected());
        assert_eq!(flow.push_samples(&x, &omegas, false).unwrap().0, corrected.push_samples(&x, &omegas, false).unwrap().0);
    }
}

#[test]
fn corrected_cd0_flow_keeps_marginals_and_moves_points() {
    let f = cd0();
    let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let builder = RotationBuilder::new(f.as_ref(), SlutskyTarget::constant_c12(0.05), 5_000, 1).unwrap();
    let corrected = flow.with_correction(Arc::new(builder));
    let x = PriceIncome::new(&[1.8, 1.3], 1.1);
    let omegas = reference_sample(f.as_ref(), 20_000, 6).unwrap();
    let (a, _) = flow.push_samples(&x, &omegas, false).unwrap();
    let (b, stats) = corrected.push_samples(&x, &omegas, false).unwrap();
    assert_eq!(stats.escaped, 0);
    assert!(a.iter().zip(&b).any(|(p, q)| p != q));
    for i in 0..2 {
        let (ca, cb): (Vec<f64>, Vec<f64>) = a.iter().zip(&b).map(|(p, q)| (p[i], q[i])).unzip();
        assert!(ks_two_sample(&ca, &cb) <= 0.02);
    }
}

#[test]
fn target_validation_and_lattice_file() {
    assert!(SlutskyTarget::constant(DMatrix::from_row_slice(2, 2, &[0.0, 0.1, 0.1, 0.0])).is_err());
    let t = SlutskyTarget::constant(a12(0.2)).unwrap();
    let tm = DMatrix::from_row_slice(2, 2, &[-0.4, 0.18, 0.18, -0.4]);
    let s = t.s(&[1.0, 1.0, 1.0], &tm);
    assert!((&s + s.transpose() - &tm).amax() < 1e-15);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let mut file = std::fs::File::create(&path).unwrap();
    writeln!(file, "p1,p2,y,c12").unwrap();
    for p1 in [1.0, 2.0] {
        for p2 in [1.0, 2.0] {
            for y in [1.0, 2.0] {
                writeln!(file, "{p1},{p2},{y},{}", 0.01 * (p1 + p2 + y)).unwrap();
            }
        }
    }
    drop(file);
    let t = SlutskyTarget::from_csv(&path, 2).unwrap();
    let c = t.c(&[1.5, 1.25, 1.75]);
    assert!((c[(0, 1)] - 0.045).abs() < 1e-15);
    assert_eq!(c[(1, 0)], -c[(0, 1)]);

    let mut file = std::fs::File::create(&path).unwrap();
    writeln!(file, "p1,p2,y,c12\n1,1,1,0\n1,2,1,0\n2,1,1,0").unwrap();
    drop(file);
    let err = SlutskyTarget::from_csv(&path, 2).unwrap_err().to_string();
    assert!(err.contains("[2.0, 2.0, 1.0]"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stored_coefficients_are_antisymmetric(c in -0.1f64..0.1, p1 in 1.0f64..2.0, y in 1.0f64..2.0) {
        let f = cd0();
        let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
        let x = PriceIncome::new(&[p1, 1.3], y);
        let co = compute_coeffs(f.as_ref(), &SlutskyTarget::constant_c12(c), &flow, &x, 2_000, 5).unwrap();
        prop_assert_eq!(&co.a + co.a.transpose(), DMatrix::zeros(2, 2));
        prop_assert!((co.a[(0, 1)] - c).abs() < 1e-12);
    }

    #[test]
    fn field_vanishes_outside_the_bump(q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        let f = builtin("tilt").unwrap();
        let b = BumpFunction::standard(&f.reference_support()).unwrap();
        let x = PriceIncome::new(&[1.1, 1.0], 1.2);
        let q = [0.2 + 0.2 * q1, 0.2 + 0.2 * q2];
        let w = rotation_field(&a12(0.07), &b, f.as_ref(), &x, 1.0, &q).unwrap();
        if !b.contains(&q) {
            prop_assert_eq!(w, vec![0.0, 0.0]);
        }
    }
}
