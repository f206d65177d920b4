mod common;

use funnelkit::funnel::{composable, rho_plot, slice_plot, Composability, Funnel};
use funnelkit::linalg::quad_form;
use funnelkit::roa::sample_unit_ball;
use funnelkit::Error;
use nalgebra::{DMatrix, DVector, Vector2};
use proptest::prelude::*;
use rand::Rng;

fn random_pd<R: Rng>(rng: &mut R, n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_vec(n, n, common::uniform_vec(rng, n * n, -1.0, 1.0));
    &m * m.transpose() + DMatrix::identity(n, n) * 0.2
}

/// Two-knot funnel: inlet `(s0, rho0)` and outlet `(s1, rho1)` around `center`.
fn two_knot(s0: DMatrix<f64>, rho0: f64, s1: DMatrix<f64>, rho1: f64, center: DVector<f64>) -> Funnel {
    Funnel::new(vec![0.0, 1.0], vec![s0, s1], vec![rho0, rho1], vec![center.clone(), center], "f".into()).unwrap()
}

fn random_funnel<R: Rng>(rng: &mut R, knots: usize, nx: usize) -> Funnel {
    let s = (0..knots).map(|_| random_pd(rng, nx)).collect();
    let rho = (0..knots)
        .map(|k| if k == 1 { f64::INFINITY } else { rng.random_range(0.01..5.0) })
        .collect();
    let centers = (0..knots)
        .map(|_| DVector::from_vec(common::uniform_vec(rng, nx, -1.0, 1.0)))
        .collect();
    Funnel::new((0..knots).map(|k| 0.1 * k as f64).collect(), s, rho, centers, "random".into()).unwrap()
}

/// Monte-Carlo containment oracle: points on the boundary of `{x̄ᵀS_a x̄ = ρ_a}`
/// around `c_a` tested against `{(x − c_b)ᵀS_b(x − c_b) ≤ ρ_b}`.
fn sampled_containment<R: Rng>(
    rng: &mut R,
    (s_a, rho_a, c_a): (&DMatrix<f64>, f64, &DVector<f64>),
    (s_b, rho_b, c_b): (&DMatrix<f64>, f64, &DVector<f64>),
    n: usize,
) -> bool {
    let chol = s_a.clone().cholesky().unwrap();
    let l_t_inv = chol.l().transpose().try_inverse().unwrap();
    (0..n).all(|_| {
        let y = sample_unit_ball(s_a.nrows(), rng);
        let dir = &l_t_inv * (&y / y.norm());
        let x = c_a + dir * rho_a.sqrt();
        quad_form(s_b, &(x - c_b)) <= rho_b * (1.0 + 1e-9)
    })
}

#[test]
fn membership_examples() {
    let mut rng = common::rng(1);
    let f = random_funnel(&mut rng, 4, 3);
    for k in 0..4 {
        assert!(f.contains(k, &f.centers[k]).unwrap());
    }
    // knot 1 is unshrunk
    assert!(f.contains(1, &DVector::from_element(3, 1e12)).unwrap());
    // boundary point pushed out by 0.1 %
    for _ in 0..100 {
        let d = DVector::from_vec(common::uniform_vec(&mut rng, 3, -1.0, 1.0));
        let level = quad_form(&f.s[0], &d);
        let edge = &f.centers[0] + d * (f.rho[0] / level).sqrt();
        let outside = &f.centers[0] + (&edge - &f.centers[0]) * 1.001;
        let inside = &f.centers[0] + (&edge - &f.centers[0]) * 0.999;
        assert!(!f.contains(0, &outside).unwrap());
        assert!(f.contains(0, &inside).unwrap());
    }
    assert!(matches!(f.contains(4, &f.centers[0]), Err(Error::Input(_))));
}

#[test]
fn construction_checks() {
    let c = DVector::zeros(2);
    let eye = DMatrix::identity(2, 2);
    assert!(Funnel::new(vec![0.0], vec![eye.clone()], vec![0.0], vec![c.clone()], "x".into()).is_err());
    assert!(Funnel::new(vec![0.0], vec![eye.clone()], vec![f64::NAN], vec![c.clone()], "x".into()).is_err());
    assert!(Funnel::new(vec![0.0, 1.0], vec![eye.clone()], vec![1.0], vec![c.clone()], "x".into()).is_err());
    let skew = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 1.0]);
    assert!(Funnel::new(vec![0.0], vec![skew], vec![1.0], vec![c], "x".into()).is_err());
}

#[test]
fn json_round_trip_preserves_membership() {
    let mut rng = common::rng(2);
    let f = random_funnel(&mut rng, 5, 4);
    let mut buf = Vec::new();
    f.write_json(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.contains("\"inf\""));
    let g = Funnel::read_json(buf.as_slice()).unwrap();
    assert_eq!(f, g);
    for _ in 0..10_000 {
        let k = rng.random_range(0..5);
        let x = DVector::from_vec(common::uniform_vec(&mut rng, 4, -3.0, 3.0));
        assert_eq!(f.contains(k, &x).unwrap(), g.contains(k, &x).unwrap());
        assert_eq!(f.level(k, &x).unwrap().to_bits(), g.level(k, &x).unwrap().to_bits());
    }
}

#[test]
fn json_rejects_bad_files() {
    let bad_version = r#"{"version":99,"knot_times":[0],"rho":[1],"S":[[1]],"centers":[[0]],"trajectory_id":"x"}"#;
    assert!(matches!(Funnel::read_json(bad_version.as_bytes()), Err(Error::Input(_))));
    let bad_rho = r#"{"version":1,"knot_times":[0],"rho":["big"],"S":[[1]],"centers":[[0]],"trajectory_id":"x"}"#;
    assert!(Funnel::read_json(bad_rho.as_bytes()).is_err());
    let bad_shape = r#"{"version":1,"knot_times":[0],"rho":[1],"S":[[1,0]],"centers":[[0]],"trajectory_id":"x"}"#;
    assert!(Funnel::read_json(bad_shape.as_bytes()).is_err());
}

#[test]
fn diagonal_projection_semi_axes() {
    let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 9.0, 1.0]));
    let f = two_knot(s.clone(), 2.0, s, 1.0, DVector::from_vec(vec![1.0, 2.0, 3.0]));
    let e = f.project(0, (0, 1)).unwrap();
    assert_eq!(e.center, Vector2::new(1.0, 2.0));
    let mut axes: Vec<f64> = e.axes().iter().map(|a| a.0).collect();
    axes.sort_by(f64::total_cmp);
    assert!((axes[0] - (2.0f64 / 9.0).sqrt()).abs() < 1e-12);
    assert!((axes[1] - (2.0f64 / 4.0).sqrt()).abs() < 1e-12);
    for p in e.boundary(64) {
        let lvl = (p - e.center).dot(&(e.shape * (p - e.center)));
        assert!((lvl - e.rho).abs() < 1e-9);
    }
}

#[test]
fn projection_errors() {
    let eye = DMatrix::identity(3, 3);
    let f = two_knot(eye.clone(), f64::INFINITY, eye, 1.0, DVector::zeros(3));
    assert!(matches!(f.project(0, (0, 1)), Err(Error::Input(_))));
    assert!(f.project(1, (0, 1)).is_ok());
    assert!(f.project(1, (0, 0)).is_err());
    assert!(f.project(1, (0, 3)).is_err());
}

#[test]
fn slice_membership_matches_full_state_membership() {
    let mut rng = common::rng(3);
    let f = random_funnel(&mut rng, 3, 5);
    for k in [0, 2] {
        for &axes in &[(0, 1), (2, 4), (3, 1)] {
            let e = f.project(k, axes).unwrap();
            for _ in 0..2000 {
                let p = e.center + Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let mut x = f.centers[k].clone();
                x[axes.0] = p[0];
                x[axes.1] = p[1];
                assert_eq!(e.contains(p), f.contains(k, &x).unwrap());
            }
        }
    }
}

#[test]
fn composability_examples() {
    let mut rng = common::rng(4);
    let s = random_pd(&mut rng, 4);
    let c = DVector::from_vec(vec![1.0, 0.0, -1.0, 2.0]);
    let a = two_knot(s.clone(), 1.0, s.clone(), 1.0, c.clone());
    assert!(composable(&a, &a).unwrap().is_contained());
    let half = two_knot(s.clone(), 0.25, s.clone(), 0.25, c.clone());
    assert!(matches!(composable(&a, &half).unwrap(), Composability::NotContained { .. }));
    assert!(composable(&half, &a).unwrap().is_contained());
    let open = two_knot(s.clone(), f64::INFINITY, s.clone(), 1.0, c);
    assert_eq!(composable(&a, &open).unwrap(), Composability::Indeterminate);
    let small = two_knot(DMatrix::identity(2, 2), 1.0, DMatrix::identity(2, 2), 1.0, DVector::zeros(2));
    assert!(matches!(composable(&a, &small), Err(Error::Dimension { .. })));
}

#[test]
fn concentric_composability_matches_sampling_oracle() {
    let mut rng = common::rng(5);
    let c = DVector::from_vec(vec![0.5, -0.5, 0.0]);
    let mut seen = [0, 0];
    for _ in 0..20 {
        let s_a = random_pd(&mut rng, 3);
        let s_b = random_pd(&mut rng, 3);
        let rho_a = rng.random_range(0.1..2.0);
        let rho_b = rng.random_range(0.1..2.0);
        let up = two_knot(s_a.clone(), 1.0, s_a.clone(), rho_a, c.clone());
        let down = two_knot(s_b.clone(), rho_b, s_b.clone(), 1.0, c.clone());
        let exact = composable(&up, &down).unwrap();
        let oracle = sampled_containment(&mut rng, (&s_a, rho_a, &c), (&s_b, rho_b, &c), 100_000);
        match exact {
            Composability::Contained { margin } => {
                assert!(oracle);
                assert!(margin >= 0.0);
                seen[0] += 1;
            }
            Composability::NotContained { margin } => {
                // sampling can miss a thin violating sliver only when the margin is tiny
                assert!(!oracle || margin > -1e-3, "margin {margin}");
                seen[1] += 1;
            }
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(seen[0] > 0 && seen[1] > 0, "{seen:?}");
}

#[test]
fn offset_composability_is_sufficient() {
    let mut rng = common::rng(6);
    for _ in 0..30 {
        let s_a = random_pd(&mut rng, 3);
        let s_b = random_pd(&mut rng, 3);
        let c_a = DVector::from_vec(common::uniform_vec(&mut rng, 3, -0.2, 0.2));
        let c_b = DVector::zeros(3);
        let rho_a = rng.random_range(0.01..0.5);
        let rho_b = rng.random_range(0.5..3.0);
        let up = two_knot(s_a.clone(), 1.0, s_a.clone(), rho_a, c_a.clone());
        let down = two_knot(s_b.clone(), rho_b, s_b.clone(), 1.0, c_b.clone());
        match composable(&up, &down).unwrap() {
            Composability::Contained { .. } => {
                assert!(sampled_containment(&mut rng, (&s_a, rho_a, &c_a), (&s_b, rho_b, &c_b), 10_000));
            }
            Composability::Inconclusive { margin } => assert!(margin < 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn containment_is_transitive() {
    let mut rng = common::rng(7);
    let c = DVector::zeros(3);
    let mut checked = 0;
    while checked < 5 {
        let s: Vec<DMatrix<f64>> = (0..3).map(|_| random_pd(&mut rng, 3)).collect();
        let rho = [0.2, rng.random_range(0.5..4.0), rng.random_range(2.0..20.0)];
        let fa = two_knot(s[0].clone(), 1.0, s[0].clone(), rho[0], c.clone());
        let fb = two_knot(s[1].clone(), rho[1], s[1].clone(), rho[1], c.clone());
        let fc = two_knot(s[2].clone(), rho[2], s[2].clone(), 1.0, c.clone());
        if composable(&fa, &fb).unwrap().is_contained() && composable(&fb, &fc).unwrap().is_contained() {
            assert!(composable(&fa, &fc).unwrap().is_contained());
            assert!(sampled_containment(&mut rng, (&s[0], rho[0], &c), (&s[2], rho[2], &c), 10_000));
            checked += 1;
        }
    }
}

#[test]
fn plots_render_svg() {
    let mut rng = common::rng(8);
    let f = random_funnel(&mut rng, 4, 3);
    let svg = slice_plot(&f, (0, 1)).unwrap().unwrap().render();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("</svg>"));
    assert!(svg.contains("stroke-dasharray"));
    let unshrunk = Funnel::new(
        vec![0.0, 1.0],
        vec![DMatrix::identity(2, 2); 2],
        vec![f64::INFINITY, f64::INFINITY],
        vec![DVector::zeros(2); 2],
        "raw".into(),
    )
    .unwrap();
    assert!(slice_plot(&unshrunk, (0, 1)).unwrap().is_none());
    assert!(slice_plot(&f, (0, 5)).is_err());
    let rho = [f64::INFINITY, 2.0, 1.0, 0.5];
    let plot = rho_plot(&[("a", &rho), ("b", &rho[1..])]);
    assert!(!plot.is_empty());
    assert!(plot.render().contains("polyline"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scaling_rho_scales_containment(seed in any::<u64>(), scale in 0.1..0.99f64) {
        let mut rng = common::rng(seed);
        let s = random_pd(&mut rng, 3);
        let c = DVector::zeros(3);
        let big = two_knot(s.clone(), 1.0, s.clone(), 1.0, c.clone());
        let small = two_knot(s.clone(), scale, s.clone(), scale, c);
        prop_assert!(composable(&small, &big).unwrap().is_contained());
        prop_assert!(!composable(&big, &small).unwrap().is_contained());
    }
}
