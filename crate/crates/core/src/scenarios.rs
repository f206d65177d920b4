//! Built-in scenarios: a freeflyer flying a circle and a planar
//! chaser–arm–target assembly detumbling after capture.
//!
//! Values the source experiments do not state (boundary states, arm pose at
//! capture, detumble weights, goal tolerances, deadband thresholds, freeflyer
//! force limits) are defaults chosen here and marked as such.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{linearize, Link, MultibodyModel, Payload, State};
use crate::error::{Error, Result};
use crate::linalg::solve_care;
use crate::roa::EstimationConfig;
use crate::sim::RolloutConfig;
use crate::trajectory::Trajectory;
use crate::trajopt::{solve, transcribe, Bounds, CostWeights, SolveReport, Waypoint};
use crate::tvlqr::{solve_tvlqr, TvlqrPolicy};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub model: MultibodyModel,
    pub weights: CostWeights,
    pub bounds: Bounds,
    pub intervals: usize,
    pub dt_init: f64,
    /// TVLQR state weight.
    pub q: DMatrix<f64>,
    /// TVLQR input weight.
    pub r: DMatrix<f64>,
    /// Terminal cost-to-go; `None` uses the infinite-horizon solution.
    pub q_f: Option<DMatrix<f64>>,
    /// Actuator model for rollouts (saturation on, deadband off).
    pub rollout: RolloutConfig,
    /// Deadband thresholds applied when the deadband is switched on.
    pub deadband: Vec<f64>,
    pub estimation: EstimationConfig,
    /// Planar offsets of the initial position for grid experiments.
    pub grid: Vec<[f64; 2]>,
}

impl Scenario {
    pub fn optimize(&self) -> Result<SolveReport> {
        let program = transcribe(
            &self.model,
            self.weights.clone(),
            self.bounds.clone(),
            self.intervals,
            self.dt_init,
        )?;
        solve(&program, None)
    }

    /// TVLQR along `traj` with this scenario's weights.
    pub fn synthesize(&self, traj: &Trajectory) -> Result<TvlqrPolicy> {
        let lin = linearize(&self.model, traj)?;
        let q_f = match &self.q_f {
            Some(m) => m.clone(),
            None => {
                let last = lin.len() - 1;
                solve_care(&lin.a[last], &lin.b[last], &self.q, &self.r)?.s
            }
        };
        solve_tvlqr(traj, &lin, &self.q, &self.r, &q_f)
    }

    /// Rollout settings with or without the deadband stage.
    pub fn rollout_config(&self, deadband: bool) -> RolloutConfig {
        let mut rc = self.rollout.clone();
        rc.deadband = deadband.then(|| self.deadband.clone());
        rc
    }
}

/// `n × n` grid of offsets spanning a square of side `side`, centred on zero.
pub fn grid_offsets(side: f64, n: usize) -> Vec<[f64; 2]> {
    if n == 1 {
        return vec![[0.0, 0.0]];
    }
    let step = side / (n - 1) as f64;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push([-side / 2.0 + i as f64 * step, -side / 2.0 + j as f64 * step]);
        }
    }
    out
}

pub const FREEFLYER_MASS: f64 = 4.26;
pub const FREEFLYER_INERTIA: f64 = 0.064;

pub fn freeflyer_scenario() -> Scenario {
    let model = MultibodyModel::rigid_body(FREEFLYER_MASS, FREEFLYER_INERTIA);
    // force limits are a default (the source does not print them)
    let u_max = vec![1.0, 1.0, 0.1];
    let mut bounds = Bounds::rest_to_rest(vec![2.0, 2.0, 0.0], vec![2.0, 2.0, 2.0 * PI], u_max.clone());
    bounds.waypoints = vec![
        Waypoint {
            knot: 30,
            q: vec![3.0, 1.0, PI / 2.0],
        },
        Waypoint {
            knot: 50,
            q: vec![4.0, 2.0, PI],
        },
        Waypoint {
            knot: 70,
            q: vec![3.0, 3.0, 3.0 * PI / 2.0],
        },
    ];
    let weights = CostWeights {
        time: 1.0,
        effort: DMatrix::identity(3, 3),
        terminal: DMatrix::zeros(6, 6),
    };
    let rollout = RolloutConfig::default().with_saturation(u_max.iter().map(|v| -v).collect(), u_max);
    let mut estimation = EstimationConfig::new(1000, vec![0.01; 6], 1);
    estimation.rollout = rollout.clone();
    Scenario {
        name: "freeflyer".into(),
        model,
        weights,
        bounds,
        intervals: 100,
        dt_init: 0.15,
        q: DMatrix::from_diagonal(&DVector::from_vec(vec![50.0, 50.0, 0.01, 50.0, 50.0, 0.001])),
        r: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, 10.0])),
        q_f: None,
        rollout,
        deadband: vec![0.45, 0.45, 0.03],
        estimation,
        grid: grid_offsets(1.0, 5),
    }
}

/// Initial angular rate of the captured assembly, 5 °/s.
pub const DETUMBLE_OMEGA0: f64 = 5.0 * PI / 180.0;

/// Arm joint angles at capture (default, not from the source).
pub const DETUMBLE_GRASP_POSE: [f64; 3] = [0.3, -0.5, 0.4];

/// Planar chaser with a three-link arm holding a captured target.
pub fn detumble_model() -> MultibodyModel {
    let rod = |mass: f64, length: f64| Link {
        mass,
        inertia: mass * length * length / 12.0,
        length,
        com_offset: length / 2.0,
    };
    MultibodyModel {
        base_mass: 100.0,
        // 2 m cube
        base_inertia: 100.0 * (4.0 + 4.0) / 12.0,
        mount: [1.0, 0.0],
        links: vec![rod(10.0, 0.9), rod(8.0, 0.7), rod(4.0, 0.3)],
        // 0.6 m cube held at its face centre
        payload: Some(Payload {
            mass: 50.0,
            inertia: 50.0 * (0.36 + 0.36) / 12.0,
            offset: [0.3, 0.0],
        }),
    }
}

/// Assembly rotating rigidly at `omega0` about its centre of mass, which is
/// placed at the origin, with base angle zero and the arm at `arm`.
pub fn post_capture_state(model: &MultibodyModel, arm: &[f64], omega0: f64) -> Result<State> {
    if arm.len() != model.joint_count() {
        return Err(Error::Dimension {
            context: "arm pose",
            expected: model.joint_count(),
            actual: arm.len(),
        });
    }
    let dof = 3 + arm.len();
    let mut q = DVector::zeros(dof);
    q.rows_mut(3, arm.len()).copy_from_slice(arm);
    let com = model.center_of_mass(&q)?;
    q[0] = -com[0];
    q[1] = -com[1];
    // base origin velocity ω × r
    let mut qd = DVector::zeros(dof);
    qd[0] = -omega0 * q[1];
    qd[1] = omega0 * q[0];
    qd[2] = omega0;
    State::new(q, qd)
}

pub fn detumble_scenario() -> Scenario {
    let model = detumble_model();
    let start = post_capture_state(&model, &DETUMBLE_GRASP_POSE, DETUMBLE_OMEGA0)
        .expect("built-in detumble model is consistent");
    let u_max = vec![10.0, 10.0, 50.0, 50.0, 50.0, 50.0];
    let n = 6;
    let bounds = Bounds {
        q_min: vec![f64::NEG_INFINITY; n],
        q_max: vec![f64::INFINITY; n],
        qd_min: vec![f64::NEG_INFINITY; n],
        qd_max: vec![f64::INFINITY; n],
        u_min: u_max.iter().map(|v| -v).collect(),
        u_max: u_max.clone(),
        q0: start.q.as_slice().to_vec(),
        qd0: start.qd.as_slice().to_vec(),
        qf: None,
        qdf: Some(vec![0.0; n]),
        waypoints: Vec::new(),
        dt_min: crate::trajopt::DT_RANGE.0,
        dt_max: crate::trajopt::DT_RANGE.1,
    };
    let mut terminal = DMatrix::zeros(12, 12);
    for i in 6..12 {
        terminal[(i, i)] = 1.0;
    }
    let weights = CostWeights {
        time: 1.0,
        // joint torques cost more so the arm stays quiet
        effort: DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.01, 0.01, 1.0, 1.0, 1.0])),
        terminal,
    };
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
        10.0, 10.0, 100.0, 10.0, 10.0, 10.0, 10.0, 10.0, 100.0, 10.0, 10.0, 10.0,
    ]));
    let r = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.1, 0.01, 0.01, 0.01, 0.01]));
    let rollout = RolloutConfig::default().with_saturation(u_max.iter().map(|v| -v).collect(), u_max);
    let mut x_max = vec![0.015; 6];
    x_max.extend([0.003; 6]);
    let mut estimation = EstimationConfig::new(1000, x_max, 1);
    estimation.rollout = rollout.clone();
    Scenario {
        name: "detumble".into(),
        model,
        weights,
        bounds,
        intervals: 100,
        dt_init: 0.05,
        q,
        r,
        q_f: None,
        rollout,
        deadband: vec![0.5, 0.5, 1.0, 1.0, 1.0, 1.0],
        estimation,
        grid: Vec::new(),
    }
}

pub fn by_name(name: &str) -> Result<Scenario> {
    match name {
        "freeflyer" => Ok(freeflyer_scenario()),
        "detumble" => Ok(detumble_scenario()),
        other => Err(Error::Config(format!(
            "unknown scenario {other:?} (expected \"freeflyer\" or \"detumble\")"
        ))),
    }
}
