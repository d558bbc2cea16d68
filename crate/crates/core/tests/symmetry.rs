use std::io::Write;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use slutsky_forge::demand_model::*;
use slutsky_forge::rotation::Lattice;
use slutsky_forge::symmetry::*;

fn cd0_node(x: [f64; 3]) -> NodeMoments {
    let f = builtin("cd0").unwrap();
    let m = moments_oracle(f.as_ref(), &PriceIncome::from_coords(x.to_vec())).unwrap();
    NodeMoments { x: x.to_vec(), price_jacobian: m.price_jacobian(), m: m.mean, second: m.second, bounds: None }
}

#[test]
fn cd0_interval_examples() {
    let node = cd0_node([1.0, 1.0, 1.0]);
    let unit = interval_compute(&node, &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0, 1).unwrap();
    assert_eq!((unit.center, unit.halfwidth, unit.margin), (0.0, 0.0, 0.0));
    assert!(unit.contains_zero);
    let wide = interval_compute(&node, &ElasticityBounds::uniform(0.9, 1.1).unwrap(), 0, 1).unwrap();
    assert!((wide.lower + 0.018).abs() < 1e-15 && (wide.upper - 0.018).abs() < 1e-15);
    assert!((wide.halfwidth - 0.018).abs() < 1e-15);
}

#[test]
fn synthetic_zero_width_interval_excludes_zero() {
    let node = NodeMoments {
        x: vec![1.0, 1.0, 1.0],
        m: DVector::from_vec(vec![0.3, 0.3]),
        second: DMatrix::from_row_slice(2, 2, &[0.1, 0.09, 0.09, 0.1]),
        price_jacobian: DMatrix::from_row_slice(2, 2, &[-0.3, 0.05, -0.05, -0.3]),
        bounds: None,
    };
    let r = interval_compute(&node, &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0, 1).unwrap();
    assert!((r.center - 0.1).abs() < 1e-15);
    assert_eq!(r.halfwidth, 0.0);
    assert!(!r.contains_zero);
    assert!(interval_compute(&node, &ElasticityBounds::Uniform { lower: 1.2, upper: 1.0 }, 0, 1).is_err());
    assert!(interval_compute(&node, &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 1, 0).is_err());
}

#[test]
fn per_good_bounds_shift_the_interval() {
    let node = cd0_node([1.0, 1.0, 1.0]);
    let b = ElasticityBounds::PerGood { lower: vec![1.0, 0.9], upper: vec![1.2, 1.0] };
    let r = interval_compute(&node, &b, 0, 1).unwrap();
    // [l1 - u2, u1 - l2] * M12 / y = [0, 0.3] * 0.09
    assert!(r.lower.abs() < 1e-15 && (r.upper - 0.027).abs() < 1e-15);
    assert!(r.contains_zero);
}

#[test]
fn cd0_grid_is_consistent_and_injection_is_rejected() {
    let f = builtin("cd0").unwrap();
    let spec = LatticeSpec::whole(4);
    let unit = grid_test(GridSource::Family(f.clone(), spec.clone()), &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0.0, 1).unwrap();
    assert_eq!(unit.verdict, "consistent");
    assert!(unit.rows.iter().all(|r| r.margin >= 0.0));

    let wide = grid_test(GridSource::Family(f.clone(), spec.clone()), &ElasticityBounds::uniform(0.9, 1.1).unwrap(), 0.0, 1).unwrap();
    assert_eq!(wide.verdict, "consistent");
    // M12 = 0.09 y^2 / (p1 p2): smallest margin where p1 p2 / y is largest.
    assert!((wide.worst_margin - 0.2 * 0.09 * 1.0 / 4.0).abs() < 1e-12, "{}", wide.worst_margin);
    assert_eq!(wide.worst_location.x, vec![2.0, 2.0, 1.0]);

    let lattice = spec.resolve(f.domain()).unwrap();
    let injected = injected_asymmetry_grid(f.as_ref(), &lattice, 0.05).unwrap();
    let rep = grid_test(GridSource::Moments(injected), &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0.0, 1).unwrap();
    assert!(rep.rejects());
    assert!(rep.worst_margin <= -0.05 + 1e-3);
}

#[test]
fn empty_lattice_intersection_is_an_error() {
    let f = builtin("cd0").unwrap();
    let spec = LatticeSpec { nodes: 3, lower: Some(vec![3.0, 1.0, 1.0]), upper: Some(vec![4.0, 2.0, 2.0]) };
    assert!(matches!(
        grid_test(GridSource::Family(f, spec), &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0.0, 1),
        Err(slutsky_forge::error::Error::Config(_))
    ));
}

fn dump_cd0(path: &std::path::Path, axes: Vec<Vec<f64>>) -> MomentGrid {
    let f = builtin("cd0").unwrap();
    let lattice = Lattice { axes };
    let grid = slutsky_forge::symmetry::family_moment_grid(f.as_ref(), &lattice, 0).unwrap();
    write_moments_csv(&grid, path).unwrap();
    grid
}

#[test]
fn ingested_oracle_dump_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let direct = dump_cd0(&path, vec![vec![1.4, 1.45, 1.5], vec![1.15, 1.2, 1.25], vec![1.35, 1.4, 1.45]]);
    let grid = moments_ingest(&path).unwrap();
    assert_eq!(grid.nodes.len(), 27);
    let b = ElasticityBounds::uniform(0.9, 1.1).unwrap();
    for (a, o) in grid.nodes.iter().zip(&direct.nodes) {
        assert_eq!(a.x, o.x);
        let (ia, io) = (interval_compute(a, &b, 0, 1).unwrap(), interval_compute(o, &b, 0, 1).unwrap());
        assert!((ia.center - io.center).abs() <= 1e-3 && (ia.halfwidth - io.halfwidth).abs() <= 1e-12);
        assert!((a.price_jacobian[(0, 1)] - o.price_jacobian[(0, 1)]).abs() <= 1e-3);
    }
    assert!(grid.one_sided[0][0] && !grid.one_sided[13][0]);
}

#[test]
fn ingestion_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    dump_cd0(&path, vec![vec![1.0, 1.5, 2.0], vec![1.0, 1.5, 2.0], vec![1.0]]);
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Drop the node (1.5, 2.0, 1.0).
    let kept: Vec<&str> = lines.iter().copied().filter(|l| !l.starts_with("1.5e0,2e0,1e0")).collect();
    assert_eq!(kept.len(), lines.len() - 1);
    std::fs::write(&path, kept.join("\n")).unwrap();
    let err = moments_ingest(&path).unwrap_err().to_string();
    assert!(err.contains("[1.5, 2.0, 1.0]"), "{err}");

    std::fs::write(&path, format!("{}\n{}\n", lines[0], lines[1])).unwrap();
    let err = moments_ingest(&path).unwrap_err().to_string();
    assert!(err.contains("insufficient nodes for differentiation"), "{err}");

    let mut file = std::fs::File::create(&path).unwrap();
    writeln!(file, "{}\n{}", lines[0], lines[1].replacen("1e0", "nan", 1)).unwrap();
    drop(file);
    let err = moments_ingest(&path).unwrap_err().to_string();
    assert!(err.contains("row 2"), "{err}");
}

#[test]
fn csv_report_layout() {
    let f = builtin("cd0").unwrap();
    let rep = grid_test(GridSource::Family(f, LatticeSpec::whole(3)), &ElasticityBounds::uniform(1.0, 1.0).unwrap(), 0.0, 1).unwrap();
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("i,j,p1,p2,y,center,halfwidth,margin,contains_zero\n"));
    assert_eq!(text.lines().count(), 28);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn widening_bounds_never_flips_a_pass(
        center in -0.05f64..0.05, m12 in 0.01f64..0.2, y in 1.0f64..2.0,
        l in 0.5f64..1.0, w in 0.0f64..0.5, extra_lo in 0.0f64..0.3, extra_hi in 0.0f64..0.3,
    ) {
        let node = NodeMoments {
            x: vec![1.0, 1.0, y],
            m: DVector::from_vec(vec![0.3, 0.3]),
            second: DMatrix::from_row_slice(2, 2, &[0.1, m12, m12, 0.1]),
            price_jacobian: DMatrix::from_row_slice(2, 2, &[-0.3, center, 0.0, -0.3]),
            bounds: None,
        };
        let narrow = interval_compute(&node, &ElasticityBounds::uniform(l, l + w).unwrap(), 0, 1).unwrap();
        let wide = interval_compute(&node, &ElasticityBounds::uniform(l - extra_lo, l + w + extra_hi).unwrap(), 0, 1).unwrap();
        prop_assert!(wide.halfwidth >= narrow.halfwidth);
        prop_assert!(!narrow.contains_zero || wide.contains_zero);
        // Recomputed from raw inputs, exactly.
        prop_assert_eq!(narrow.center, node.price_jacobian[(0, 1)] - node.price_jacobian[(1, 0)]);
        prop_assert_eq!(narrow.contains_zero, narrow.margin >= 0.0);
    }
}
