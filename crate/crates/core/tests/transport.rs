use std::f64::consts::PI;
use std::sync::Arc;

use slutsky_forge::demand_model::*;
use slutsky_forge::elliptic::{Grid2D, VectorGridField};
use slutsky_forge::transport::*;

/// Density `1 + 0.5 sin(pi t) (q1 - 1/2)` on the unit square with
/// `t = y - 1`; prices do nothing.
struct Wobble {
    domain: BoxDomain,
}

impl Wobble {
    fn new() -> Self {
        Self { domain: BoxDomain::cube(3, 1.0, 2.0).unwrap() }
    }

    /// `u'(q1) = -int_0^q1 d_t rho` divided by `rho`.
    fn exact_velocity(t: f64, q1: f64) -> f64 {
        let du = -0.5 * PI * (PI * t).cos() * (0.5 * q1 * q1 - 0.5 * q1);
        du / (1.0 + 0.5 * (PI * t).sin() * (q1 - 0.5))
    }
}

impl DemandFamily for Wobble {
    fn name(&self) -> &str {
        "wobble"
    }
    fn dim(&self) -> usize {
        2
    }
    fn domain(&self) -> &BoxDomain {
        &self.domain
    }
    fn support(&self, _x: &[f64]) -> BoxDomain {
        BoxDomain::cube(2, 0.0, 1.0).unwrap()
    }
    fn density(&self, x: &[f64], q: &[f64]) -> f64 {
        if !self.support(x).contains(q) {
            return 0.0;
        }
        1.0 + 0.5 * (PI * (x[2] - 1.0)).sin() * (q[0] - 0.5)
    }
    fn forward(&self, _x: &[f64], w: &[f64], out: &mut [f64]) {
        out.copy_from_slice(w);
    }
    fn inverse(&self, _x: &[f64], q: &[f64], out: &mut [f64]) {
        out.copy_from_slice(q);
    }
    fn jacobian(&self, _x: &[f64], _w: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
}

fn rk4_exact(t1: f64, q0: f64, steps: usize) -> f64 {
    let h = t1 / steps as f64;
    let mut q = q0;
    for s in 0..steps {
        let t = s as f64 * h;
        let k1 = Wobble::exact_velocity(t, q);
        let k2 = Wobble::exact_velocity(t + 0.5 * h, q + 0.5 * h * k1);
        let k3 = Wobble::exact_velocity(t + 0.5 * h, q + 0.5 * h * k2);
        let k4 = Wobble::exact_velocity(t + h, q + h * k3);
        q += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    q
}

#[test]
fn zero_potential_gives_zero_velocity_and_scaling_is_exact() {
    let g = Grid2D::unit(17).unwrap();
    let zero = g.from_fn(|_| 0.0);
    let rho = g.from_fn(|z| 1.0 + z[0]);
    assert!(velocity_from_potential(&zero, &rho, 0.5).unwrap().is_zero());

    let u = g.from_fn(|z| z[0] * z[0] + z[1]);
    let v1 = velocity_from_potential(&u, &rho, 0.5).unwrap();
    let rho2 = g.from_fn(|z| 2.0 * (1.0 + z[0]));
    let v2 = velocity_from_potential(&u, &rho2, 0.5).unwrap();
    for (a, b) in v1.values.iter().zip(&v2.values) {
        assert_eq!(a[0], 2.0 * b[0]);
        assert_eq!(a[1], 2.0 * b[1]);
    }
    assert!(velocity_from_potential(&u, &rho, 1.5).is_err());
}

#[test]
fn mcshane_extension_examples() {
    let g = Grid2D::unit(17).unwrap();
    let lin = VectorGridField { grid: g.clone(), values: g.nodes().map(|z| [z[0], 0.0]).collect() };
    assert!(lipschitz_extend(&lin, 1.0, &[2.0, 0.5])[0].abs() < 1e-12);
    let inside = lipschitz_extend(&lin, 1.0, &[0.37, 0.2]);
    assert!((inside[0] - 0.37).abs() < 1e-12);
    let c = VectorGridField { grid: g.clone(), values: vec![[0.7, -0.2]; g.len()] };
    let out = lipschitz_extend(&c, 3.0, &[0.25, 0.6]);
    assert!((out[0] - 0.7).abs() < 1e-12 && (out[1] + 0.2).abs() < 1e-12);
    // Outside, the sup is attained at the nearest node with penalty L * dist.
    let out = lipschitz_extend(&c, 3.0, &[-0.5, 1.0]);
    assert!((out[0] - (0.7 - 1.5)).abs() < 1e-12 && (out[1] - (-0.2 - 1.5)).abs() < 1e-12);
}

#[test]
fn tilt_income_leg_matches_antiderivative_oracle() {
    let f = Tilt::standard();
    let leg = build_leg(&f, 2, &[1.0, 1.0, 1.0], &FlowConfig::default()).unwrap();
    // First knot is y = 1, where theta = 0 and d_t rho~ = 125 (q1 - 0.3).
    let field = &leg.fields[0];
    for q1 in [0.22, 0.26, 0.3, 0.34, 0.38] {
        let du = -125.0 * ((q1 - 0.3f64).powi(2) - 0.01) / 2.0;
        let v = field.interpolate(&[q1, 0.31]);
        assert!((v[0] - du / 25.0).abs() < 2e-5, "q1 = {q1}: {} vs {}", v[0], du / 25.0);
        assert!(v[1].abs() < 1e-9);
    }
    assert!((field.interpolate(&[0.3, 0.3])[0] - 0.025).abs() < 2e-5);
}

#[test]
fn tilt_second_price_leg_is_zero_and_cd0_legs_are_zero() {
    let f = Tilt::standard();
    let leg = build_leg(&f, 1, &[1.1, 1.0, 1.0], &FlowConfig::default()).unwrap();
    assert!(leg.is_zero());
    let cd = CobbDouglas::standard();
    for k in 0..3 {
        assert!(build_leg(&cd, k, &[1.5, 1.3, 1.0], &FlowConfig::default()).unwrap().is_zero());
    }
}

#[test]
fn leg_integration_self_convergence() {
    let f = Wobble::new();
    let leg = build_leg(&f, 2, &[1.0, 1.0, 1.0], &FlowConfig::default()).unwrap();
    for w in [[0.2, 0.5], [0.5, 0.5], [0.8, 0.1], [0.05, 0.9]] {
        let coarse = leg_integrate(&leg, 1.9, &w, 64).unwrap();
        let fine = leg_integrate(&leg, 1.9, &w, 512).unwrap();
        assert!((coarse[0] - fine[0]).abs() < 1e-8 && (coarse[1] - fine[1]).abs() < 1e-8);
        // Against the analytic field the gap is the grid and knot error.
        let exact = rk4_exact(0.9, w[0], 4096);
        assert!((fine[0] - exact).abs() < 2e-4, "{} vs {exact}", fine[0]);
        assert_eq!(leg_integrate(&leg, 1.0, &w, 64).unwrap(), w);
    }
}

#[test]
fn cd0_flow_reduces_to_the_support_map() {
    let f: Arc<dyn DemandFamily> = Arc::new(CobbDouglas::standard());
    let flow = CompositeFlow::new(f, FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[1.5, 1.2], 1.4);
    let q = composite_eval(&flow, &x, &[0.3, 0.3]).unwrap();
    assert!((q[0] - 0.28).abs() < 1e-14 && (q[1] - 0.35).abs() < 1e-14);
}

#[test]
fn identity_at_reference_point() {
    for f in [builtin("cd0").unwrap(), builtin("tilt").unwrap()] {
        let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
        let x0 = f.reference_point();
        for w in [[0.2, 0.4], [0.31234567, 0.2999999]] {
            assert_eq!(composite_eval(&flow, &x0, &w).unwrap(), w);
        }
    }
}

#[test]
fn cd0_jacobian_closed_form() {
    let f: Arc<dyn DemandFamily> = Arc::new(CobbDouglas::standard());
    let flow = CompositeFlow::new(f, FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[1.0, 1.0], 1.0);
    let rep = flow_jacobian_fd(&flow, &x, &[0.3, 0.3], 1e-3, 1e-3).unwrap();
    assert!(rep.one_sided.iter().all(|b| *b));
    let j = rep.jacobian;
    assert!((j.dy[0] - 0.3).abs() < 1e-9 && (j.dy[1] - 0.3).abs() < 1e-9);
    assert!((j.dp[(0, 0)] + 0.3).abs() < 1e-6 && (j.dp[(1, 1)] + 0.3).abs() < 1e-6);
    assert!(j.dp[(0, 1)].abs() < 1e-12 && j.dp[(1, 0)].abs() < 1e-12);
    // Law of motion: D_y Phi equals the income-leg velocity T_x(w) / y.
    let x = PriceIncome::new(&[1.4, 1.6], 1.5);
    let j = flow_jacobian_fd(&flow, &x, &[0.27, 0.33], 1e-3, 1e-3).unwrap().jacobian;
    let q = j.value;
    assert!((j.dy[0] - q[0] / 1.5).abs() < 1e-6 && (j.dy[1] - q[1] / 1.5).abs() < 1e-6);
}

#[test]
fn tilt_flow_stays_in_budget_and_is_deterministic() {
    let f = builtin("tilt").unwrap();
    let flow = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[1.02, 1.1], 1.18);
    let omegas = reference_sample(f.as_ref(), 500, 3).unwrap();
    let (a, sa) = flow.push_samples(&x, &omegas, false).unwrap();
    let (b, _) = flow.push_samples(&x, &omegas, false).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa.escaped, 0);
    for q in &a {
        assert!(x.p()[0] * q[0] + x.p()[1] * q[1] < x.y());
    }
}

#[test]
fn halving_rk4_steps_is_stable() {
    let f = builtin("tilt").unwrap();
    let x = PriceIncome::from_coords(vec![1.05, 1.15, 1.18]);
    let coarse = CompositeFlow::new(f.clone(), FlowConfig { steps: 32, ..FlowConfig::default() }).unwrap();
    let fine = CompositeFlow::new(f.clone(), FlowConfig::default()).unwrap();
    let omegas = reference_sample(f.as_ref(), 200, 11).unwrap();
    let (a, _) = coarse.push_samples(&x, &omegas, false).unwrap();
    let (b, _) = fine.push_samples(&x, &omegas, false).unwrap();
    let worst = a.iter().zip(&b).fold(0.0f64, |m, (p, q)| m.max((p[0] - q[0]).abs()).max((p[1] - q[1]).abs()));
    assert!(worst <= 1e-6, "{worst}");
}

#[test]
fn outside_domain_is_rejected() {
    let f = builtin("cd0").unwrap();
    let flow = CompositeFlow::new(f, FlowConfig::default()).unwrap();
    let x = PriceIncome::new(&[2.5, 1.0], 1.0);
    assert!(matches!(composite_eval(&flow, &x, &[0.3, 0.3]), Err(slutsky_forge::error::Error::Domain(_))));
}
