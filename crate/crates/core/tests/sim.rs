mod common;

use funnelkit::dynamics::{linearize, PointMass};
use funnelkit::linalg::solve_care;
use funnelkit::scenarios::freeflyer_scenario;
use funnelkit::sim::{nominal_fuel, rollout, FuelBudget, RolloutConfig, Termination};
use funnelkit::trajectory::Trajectory;
use funnelkit::tvlqr::{solve_tvlqr, TvlqrPolicy};
use funnelkit::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn policy_for(plant: &PointMass, traj: &Trajectory) -> TvlqrPolicy {
    let lin = linearize(plant, traj).unwrap();
    let nx = traj.state_dim();
    let nu = traj.input_dim();
    let q = DMatrix::identity(nx, nx);
    let r = DMatrix::identity(nu, nu);
    let last = lin.len() - 1;
    let s_inf = solve_care(&lin.a[last], &lin.b[last], &q, &r).unwrap().s;
    solve_tvlqr(traj, &lin, &q, &r, &s_inf).unwrap()
}

/// Exact solution of a unit point mass under a constant force per axis.
fn constant_push(force: &[f64], duration: f64, n: usize) -> Trajectory {
    let d = force.len();
    let dt = duration / n as f64;
    let states = (0..=n)
        .map(|k| {
            let t = k as f64 * dt;
            let mut x = DVector::zeros(2 * d);
            for i in 0..d {
                x[i] = 0.5 * force[i] * t * t;
                x[d + i] = force[i] * t;
            }
            x
        })
        .collect();
    let controls = vec![DVector::from_column_slice(force); n];
    Trajectory::new(dt, states, controls).unwrap()
}

fn coasting(n: usize, dt: f64) -> Trajectory {
    let states = (0..=n)
        .map(|k| DVector::from_vec(vec![0.5 * k as f64 * dt, 0.5]))
        .collect();
    Trajectory::new(dt, states, vec![DVector::zeros(1); n]).unwrap()
}

#[test]
fn nominal_fuel_examples() {
    assert_eq!(nominal_fuel(&coasting(10, 0.1)), 0.0);
    let traj = constant_push(&[1.0, 0.0, 0.0], 2.0, 20);
    assert!((nominal_fuel(&traj) - 2.0).abs() <= 1e-12);
    // mixed signs count by magnitude
    let traj = constant_push(&[-0.5, 0.25], 4.0, 8);
    assert!((nominal_fuel(&traj) - 3.0).abs() <= 1e-12);
}

#[test]
fn coasting_nominal_stays_on_nominal() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(50, 0.05);
    let policy = policy_for(&plant, &traj);
    let rho_f = 1.0;
    let res = rollout(&plant, &policy, &traj.states[0], &RolloutConfig::default(), None).unwrap();
    assert!(res.completed());
    assert_eq!(res.states.len(), 51);
    assert!(res.cost_to_go.iter().all(|j| *j <= 1e-8 * rho_f));
    assert!(res.fuel.iter().all(|f| *f <= 1e-12));
}

#[test]
fn exact_nominal_costs_nothing_and_burns_nominal_fuel() {
    let plant = PointMass::new(1.0, 3).unwrap();
    let traj = constant_push(&[1.0, 0.0, 0.0], 2.0, 200);
    let policy = policy_for(&plant, &traj);
    let rho_f = 1e-2;
    let f0 = nominal_fuel(&traj);
    let cfg = RolloutConfig {
        fuel: Some(FuelBudget::new(f0, 0.0).unwrap()),
        ..Default::default()
    };
    let res = rollout(&plant, &policy, &traj.states[0], &cfg, None).unwrap();
    assert_eq!(res.termination, Termination::Completed);
    let worst = res.cost_to_go.iter().cloned().fold(0.0, f64::max);
    assert!(worst <= 1e-8 * rho_f, "{worst:e}");
    let used = *res.fuel.last().unwrap();
    assert!((used - f0).abs() <= 0.01 * f0, "{used} vs {f0}");
}

#[test]
fn fuel_is_monotone_and_nonnegative_cost() {
    let plant = PointMass::new(1.0, 2).unwrap();
    let traj = constant_push(&[0.3, -0.2], 3.0, 60);
    let policy = policy_for(&plant, &traj);
    let x0 = &traj.states[0] + DVector::from_vec(vec![0.2, -0.1, 0.05, 0.0]);
    let res = rollout(&plant, &policy, &x0, &RolloutConfig::default(), None).unwrap();
    assert!(res.completed());
    assert!(res.fuel.windows(2).all(|w| w[1] >= w[0]));
    assert!(res.cost_to_go.iter().all(|j| *j >= 0.0));
    // feedback drives the cost-to-go down
    assert!(res.final_cost() < res.cost_to_go[0]);
}

#[test]
fn fuel_matches_riemann_oracle() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(20, 0.1);
    let policy = policy_for(&plant, &traj);
    let x0 = DVector::from_vec(vec![0.3, 0.1]);
    let mut cfg = RolloutConfig {
        record_trace: true,
        ..Default::default()
    };
    let res = rollout(&plant, &policy, &x0, &cfg, None).unwrap();
    // left Riemann sum of |u| over a 10× finer rollout
    cfg.dt = 1e-4;
    let fine = rollout(&plant, &policy, &x0, &cfg, None).unwrap();
    let h = 1e-4;
    let riemann: f64 = fine.trace.iter().map(|s| s.u[0].abs() * h).sum();
    let used = *res.fuel.last().unwrap();
    assert!((used - riemann).abs() <= 1e-3 * riemann, "{used} vs {riemann}");
}

#[test]
fn fuel_budget_limit() {
    let b = FuelBudget::new(2.0, 0.5).unwrap();
    assert_eq!(b.limit(), 3.0);
    assert!(!b.exceeded(3.0 + 0.5 * b.tolerance * 2.0));
    assert!(b.exceeded(3.0 + 2.0 * b.tolerance * 2.0));
    let unlimited = FuelBudget::new(2.0, f64::INFINITY).unwrap();
    assert_eq!(unlimited.limit(), f64::INFINITY);
    assert!(!unlimited.exceeded(1e300));
    assert!(matches!(FuelBudget::new(2.0, -1.0), Err(Error::Config(_))));
    assert!(matches!(FuelBudget::new(f64::NAN, 1.0), Err(Error::Config(_))));
}

#[test]
fn fuel_breach_fires_at_first_offending_knot() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = constant_push(&[1.0], 2.0, 40);
    let policy = policy_for(&plant, &traj);
    let f0 = nominal_fuel(&traj);
    let cfg = RolloutConfig {
        fuel: Some(FuelBudget::new(f0, 0.0).unwrap()),
        ..Default::default()
    };
    let x0 = DVector::from_vec(vec![-2.0, 0.0]);
    let free = rollout(&plant, &policy, &x0, &RolloutConfig::default(), None).unwrap();
    let limit = f0 * (1.0 + DEFAULT_TOL);
    let first = free.fuel.iter().position(|f| *f > limit).expect("offset costs extra fuel");
    let res = rollout(&plant, &policy, &x0, &cfg, None).unwrap();
    assert_eq!(res.termination, Termination::FuelExceeded(first));
    assert_eq!(res.states.len(), first + 1);
}

const DEFAULT_TOL: f64 = funnelkit::sim::DEFAULT_FUEL_TOLERANCE;

#[test]
fn cost_threshold_stops_rollout() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(20, 0.1);
    let policy = policy_for(&plant, &traj);
    let x0 = DVector::from_vec(vec![0.5, 0.0]);
    let free = rollout(&plant, &policy, &x0, &RolloutConfig::default(), None).unwrap();
    let mut rho = vec![f64::INFINITY; 21];
    rho[5] = 0.5 * free.cost_to_go[5];
    rho[20] = 1.0;
    let res = rollout(&plant, &policy, &x0, &RolloutConfig::default(), Some(&rho)).unwrap();
    assert_eq!(res.termination, Termination::CostExceeded(5));
    assert!(!res.termination.is_violation());
    assert_eq!(res.termination.breach_knot(), Some(5));
}

#[test]
fn divergence_is_a_termination_not_an_error() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(20, 0.1);
    let policy = policy_for(&plant, &traj);
    let cfg = RolloutConfig {
        divergence_limit: 1.0,
        ..Default::default()
    };
    let res = rollout(&plant, &policy, &DVector::from_vec(vec![0.0, 50.0]), &cfg, None).unwrap();
    assert!(matches!(res.termination, Termination::Diverged(1)));
    assert!(res.termination.is_violation());
    let res = rollout(&plant, &policy, &DVector::from_vec(vec![f64::NAN, 0.0]), &RolloutConfig::default(), None)
        .unwrap();
    assert!(matches!(res.termination, Termination::Diverged(_)));
}

#[test]
fn deadband_then_saturation() {
    let cfg = RolloutConfig {
        deadband: Some(vec![0.5, 0.5]),
        ..Default::default()
    }
    .with_saturation(vec![-1.0, -0.2], vec![1.0, 0.2]);
    let u = cfg.actuate(DVector::from_vec(vec![0.4, 0.6]));
    // 0.4 falls in the deadband; 0.6 passes it and is then clamped
    assert_eq!(u.as_slice(), &[0.0, 0.2]);
    let u = cfg.actuate(DVector::from_vec(vec![-3.0, -0.49]));
    assert_eq!(u.as_slice(), &[-1.0, 0.0]);
    // with the order reversed, 0.6 would be clamped to 0.2 and then zeroed
}

#[test]
fn saturation_is_respected_in_trace() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(20, 0.1);
    let policy = policy_for(&plant, &traj);
    let cfg = RolloutConfig {
        record_trace: true,
        ..Default::default()
    }
    .with_saturation(vec![-0.1], vec![0.1]);
    let res = rollout(&plant, &policy, &DVector::from_vec(vec![2.0, 0.0]), &cfg, None).unwrap();
    assert!(res.trace.iter().all(|s| s.u[0].abs() <= 0.1));
    assert!(res.trace.iter().any(|s| s.u[0].abs() == 0.1));
}

#[test]
fn rk4_is_fourth_order() {
    // errors against a fine reference should fall by about 16× per halving
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(10, 0.4);
    let policy = policy_for(&plant, &traj);
    let x0 = DVector::from_vec(vec![0.8, -0.3]);
    let end = |dt: f64| {
        let cfg = RolloutConfig {
            dt,
            ..Default::default()
        };
        rollout(&plant, &policy, &x0, &cfg, None).unwrap().states.last().unwrap().clone()
    };
    let reference = end(0.4 / 64.0);
    let e1 = (end(0.4 / 8.0) - &reference).norm();
    let e2 = (end(0.4 / 16.0) - &reference).norm();
    assert!(e1 / e2 >= 8.0, "{e1:e} / {e2:e}");
}

#[test]
fn identical_inputs_give_identical_results() {
    let plant = PointMass::new(1.0, 2).unwrap();
    let traj = constant_push(&[0.3, -0.2], 3.0, 30);
    let policy = policy_for(&plant, &traj);
    let x0 = DVector::from_vec(vec![0.1, 0.2, 0.0, -0.1]);
    let cfg = RolloutConfig {
        record_trace: true,
        ..Default::default()
    };
    let a = rollout(&plant, &policy, &x0, &cfg, None).unwrap();
    let b = rollout(&plant, &policy, &x0, &cfg, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn trace_csv_layout() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(4, 0.1);
    let policy = policy_for(&plant, &traj);
    let cfg = RolloutConfig {
        dt: 0.05,
        record_trace: true,
        ..Default::default()
    };
    let res = rollout(&plant, &policy, &DVector::from_vec(vec![0.1, 0.0]), &cfg, None).unwrap();
    let mut buf = Vec::new();
    res.write_trace_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x0,x1,u0,J,F");
    // two steps per interval plus the final sample
    assert_eq!(lines.count(), 9);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let plant = PointMass::new(1.0, 1).unwrap();
    let traj = coasting(4, 0.1);
    let policy = policy_for(&plant, &traj);
    let bad = DVector::zeros(3);
    assert!(matches!(
        rollout(&plant, &policy, &bad, &RolloutConfig::default(), None),
        Err(Error::Dimension { .. })
    ));
    let other = PointMass::new(1.0, 2).unwrap();
    assert!(rollout(&other, &policy, &DVector::zeros(2), &RolloutConfig::default(), None).is_err());
    let cfg = RolloutConfig::default().with_saturation(vec![1.0], vec![-1.0]);
    assert!(matches!(
        rollout(&plant, &policy, &DVector::zeros(2), &cfg, None),
        Err(Error::Config(_))
    ));
}

#[test]
fn freeflyer_deadband_leaves_residual_velocity() {
    let sc = freeflyer_scenario();
    let traj = sc.optimize().unwrap().trajectory;
    let policy = sc.synthesize(&traj).unwrap();
    let mut x0 = traj.states[0].clone();
    x0[0] += 0.5;
    let speed = |cfg: &RolloutConfig| {
        let res = rollout(&sc.model, &policy, &x0, cfg, None).unwrap();
        assert!(res.completed());
        let xf = res.states.last().unwrap();
        (xf[3].powi(2) + xf[4].powi(2)).sqrt()
    };
    let with = speed(&sc.rollout_config(true));
    let without = speed(&sc.rollout_config(false));
    assert!(with > 1e-3, "{with}");
    assert!(with > without, "{with} vs {without}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn actuate_output_within_bounds(u in prop::collection::vec(-10.0..10.0f64, 3)) {
        let cfg = RolloutConfig {
            deadband: Some(vec![0.5, 0.1, 0.0]),
            ..Default::default()
        }
        .with_saturation(vec![-1.0, -2.0, -3.0], vec![1.0, 2.0, 3.0]);
        let out = cfg.actuate(DVector::from_vec(u.clone()));
        for i in 0..3 {
            prop_assert!(out[i] >= -(i as f64 + 1.0) && out[i] <= i as f64 + 1.0);
            if out[i] != 0.0 {
                prop_assert_eq!(out[i].signum(), u[i].signum());
            }
        }
        prop_assert!(u[0].abs() >= 0.5 || out[0] == 0.0);
    }
}
