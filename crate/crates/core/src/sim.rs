//! Closed-loop rollouts under a TVLQR policy.
//!
//! The actuator chain is feedback → deadband → saturation. States are
//! integrated with fixed-step RK4; the step is the largest divisor of the
//! knot spacing not exceeding the configured `dt`. Monitors (fuel, cost,
//! divergence) fire at knots, except the non-finite/divergence guard, which
//! runs every step.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
use crate::tvlqr::TvlqrPolicy;

pub const DEFAULT_DT: f64 = 1e-3;

/// Relative slack on fuel-limit checks, as a fraction of the nominal fuel.
/// Covers quadrature error and the small corrective effort needed to track an
/// Euler-transcribed nominal with RK4.
pub const DEFAULT_FUEL_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FuelBudget {
    /// Fuel of the nominal trajectory.
    pub nominal: f64,
    /// Allowed overhead; `f64::INFINITY` disables the limit.
    pub alpha: f64,
    /// Slack on breach detection, relative to `nominal`.
    #[serde(default = "default_fuel_tolerance")]
    pub tolerance: f64,
}

fn default_fuel_tolerance() -> f64 {
    DEFAULT_FUEL_TOLERANCE
}

impl FuelBudget {
    pub fn new(nominal: f64, alpha: f64) -> Result<Self> {
        if !(nominal >= 0.0) || !nominal.is_finite() {
            return Err(Error::Config(format!("nominal fuel must be finite and ≥ 0, got {nominal}")));
        }
        if !(alpha >= 0.0) {
            return Err(Error::Config(format!("fuel multiplier must be ≥ 0 or inf, got {alpha}")));
        }
        Ok(Self {
            nominal,
            alpha,
            tolerance: DEFAULT_FUEL_TOLERANCE,
        })
    }

    /// `F_max = (1 + α)·F0`.
    pub fn limit(&self) -> f64 {
        if self.alpha.is_infinite() {
            f64::INFINITY
        } else {
            (1.0 + self.alpha) * self.nominal
        }
    }

    pub fn exceeded(&self, fuel: f64) -> bool {
        fuel > self.limit() + self.tolerance * self.nominal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Largest integrator step.
    pub dt: f64,
    /// Componentwise clamp `(u_min, u_max)`.
    pub saturation: Option<(Vec<f64>, Vec<f64>)>,
    /// Per-channel thresholds below which commands are zeroed.
    pub deadband: Option<Vec<f64>>,
    /// Abort once `‖x − x*‖_∞` exceeds this.
    pub divergence_limit: f64,
    pub fuel: Option<FuelBudget>,
    /// Keep per-step samples for CSV export.
    pub record_trace: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            saturation: None,
            deadband: None,
            divergence_limit: 1e6,
            fuel: None,
            record_trace: false,
        }
    }
}

impl RolloutConfig {
    pub fn with_saturation(mut self, u_min: Vec<f64>, u_max: Vec<f64>) -> Self {
        self.saturation = Some((u_min, u_max));
        self
    }

    fn validate(&self, nu: usize) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Config(format!("integrator step must be positive, got {}", self.dt)));
        }
        if let Some((lo, hi)) = &self.saturation {
            if lo.len() != nu || hi.len() != nu {
                return Err(Error::Config(format!("saturation bounds must have {nu} entries")));
            }
            if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                return Err(Error::Config("saturation lower bound exceeds upper bound".into()));
            }
        }
        if let Some(db) = &self.deadband {
            if db.len() != nu || db.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("deadband needs {nu} non-negative thresholds")));
            }
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::Config("divergence limit must be positive".into()));
        }
        Ok(())
    }

    /// Deadband, then saturation.
    pub fn actuate(&self, mut u: DVector<f64>) -> DVector<f64> {
        if let Some(db) = &self.deadband {
            for (v, thr) in u.iter_mut().zip(db) {
                if v.abs() < *thr {
                    *v = 0.0;
                }
            }
        }
        if let Some((lo, hi)) = &self.saturation {
            for i in 0..u.len() {
                u[i] = u[i].clamp(lo[i], hi[i]);
            }
        }
        u
    }

    /// Integrator substeps per knot interval of length `knot_dt`.
    pub fn substeps(&self, knot_dt: f64) -> usize {
        ((knot_dt / self.dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "knot", rename_all = "kebab-case")]
pub enum Termination {
    Completed,
    /// Fuel above the budget at this knot.
    FuelExceeded(usize),
    /// Cost-to-go above the funnel threshold at this knot.
    CostExceeded(usize),
    /// Non-finite or runaway state during the interval ending at this knot.
    Diverged(usize),
}

impl Termination {
    /// Knot at which the rollout stopped early.
    pub fn breach_knot(&self) -> Option<usize> {
        match *self {
            Termination::Completed => None,
            Termination::FuelExceeded(k) | Termination::CostExceeded(k) | Termination::Diverged(k) => Some(k),
        }
    }

    /// A constraint violation (as opposed to a funnel-threshold exceedance).
    pub fn is_violation(&self) -> bool {
        matches!(self, Termination::FuelExceeded(_) | Termination::Diverged(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub cost_to_go: f64,
    pub fuel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// States at knots `0…k_end`.
    pub states: Vec<DVector<f64>>,
    /// `J*_k` at the same knots.
    pub cost_to_go: Vec<f64>,
    /// Cumulative fuel at the same knots.
    pub fuel: Vec<f64>,
    pub termination: Termination,
    pub trace: Vec<TraceSample>,
}

impl RolloutResult {
    pub fn completed(&self) -> bool {
        self.termination == Termination::Completed
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost_to_go.last().unwrap_or(&f64::NAN)
    }

    /// Trace as CSV: `t, x0…, u0…, J, F`.
    pub fn write_trace_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if let Some(first) = self.trace.first() {
            let mut header = vec!["t".to_string()];
            header.extend((0..first.x.len()).map(|i| format!("x{i}")));
            header.extend((0..first.u.len()).map(|i| format!("u{i}")));
            header.push("J".into());
            header.push("F".into());
            w.write_record(&header)?;
        }
        for s in &self.trace {
            let mut row = vec![format!("{:?}", s.t)];
            row.extend(s.x.iter().map(|v| format!("{v:?}")));
            row.extend(s.u.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", s.cost_to_go));
            row.push(format!("{:?}", s.fuel));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact integral of `Σ|u*_i(t)|` for the zero-order-hold nominal controls.
pub fn nominal_fuel(traj: &Trajectory) -> f64 {
    traj.controls
        .iter()
        .map(|u| traj.dt * u.iter().map(|v| v.abs()).sum::<f64>())
        .sum()
}

/// One RK4 step of `ẋ = f(x, input(t, x))`.
pub fn rk4_step<P, F>(plant: &P, t: f64, x: &DVector<f64>, h: f64, input: F) -> DVector<f64>
where
    P: Plant + ?Sized,
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let f = |t: f64, x: &DVector<f64>| plant.state_derivative(x, &input(t, x));
    let k1 = f(t, x);
    let k2 = f(t + h / 2.0, &(x + &k1 * (h / 2.0)));
    let k3 = f(t + h / 2.0, &(x + &k2 * (h / 2.0)));
    let k4 = f(t + h, &(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Simulate the closed loop from `x0` over the policy's horizon.
///
/// With `rho`, the rollout stops at the first knot `k ≥ 1` whose cost-to-go
/// exceeds `rho[k]`.
pub fn rollout<P: Plant + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    x0: &DVector<f64>,
    config: &RolloutConfig,
    rho: Option<&[f64]>,
) -> Result<RolloutResult> {
    let nx = policy.state_dim();
    let nu = policy.input_dim();
    if plant.state_dim() != nx || plant.input_dim() != nu {
        return Err(Error::Input("plant and policy dimensions differ".into()));
    }
    if x0.len() != nx {
        return Err(Error::Dimension {
            context: "initial state",
            expected: nx,
            actual: x0.len(),
        });
    }
    if let Some(r) = rho {
        if r.len() != policy.knots() {
            return Err(Error::Input(format!(
                "expected {} thresholds, got {}",
                policy.knots(),
                r.len()
            )));
        }
    }
    config.validate(nu)?;

    let traj = &policy.trajectory;
    let knot_dt = traj.dt;
    let steps = config.substeps(knot_dt);
    let h = knot_dt / steps as f64;
    let command = |k: usize, t: f64, x: &DVector<f64>| -> DVector<f64> {
        // the segment index is always valid here
        let u = policy.feedback_in_segment(k, t, x).unwrap_or_else(|_| DVector::from_element(nu, f64::NAN));
        config.actuate(u)
    };
    let sum_abs = |u: &DVector<f64>| u.iter().map(|v| v.abs()).sum::<f64>();

    let mut x = x0.clone();
    let mut fuel = 0.0;
    let mut states = vec![x.clone()];
    let mut costs = vec![policy.cost_to_go_at_knot(0, &x)?];
    let mut fuels = vec![0.0];
    let mut trace = Vec::new();
    let mut termination = Termination::Completed;

    'outer: for k in 0..traj.intervals() {
        let t0 = traj.time(k);
        let mut u_prev = command(k, t0, &x);
        for i in 0..steps {
            let t = t0 + i as f64 * h;
            if config.record_trace {
                trace.push(TraceSample {
                    t,
                    x: x.clone(),
                    u: u_prev.clone(),
                    cost_to_go: policy.cost_to_go(t, &x).unwrap_or(f64::NAN),
                    fuel,
                });
            }
            x = rk4_step(plant, t, &x, h, |t, x| command(k, t, x));
            let t1 = t0 + (i + 1) as f64 * h;
            let deviation = (&x - policy.nominal_state(t1.min(policy.duration()))?).amax();
            if x.iter().any(|v| !v.is_finite()) || !(deviation <= config.divergence_limit) {
                termination = Termination::Diverged(k + 1);
                break 'outer;
            }
            let u_next = command(k, t1, &x);
            fuel += 0.5 * h * (sum_abs(&u_prev) + sum_abs(&u_next));
            u_prev = u_next;
        }
        let j = policy.cost_to_go_at_knot(k + 1, &x)?;
        states.push(x.clone());
        costs.push(j);
        fuels.push(fuel);
        if config.fuel.is_some_and(|b| b.exceeded(fuel)) {
            termination = Termination::FuelExceeded(k + 1);
            break;
        }
        if rho.is_some_and(|r| j > r[k + 1]) {
            termination = Termination::CostExceeded(k + 1);
            break;
        }
    }
    if config.record_trace && termination == Termination::Completed {
        let t = policy.duration();
        trace.push(TraceSample {
            t,
            x: x.clone(),
            u: command(traj.intervals() - 1, t, &x),
            cost_to_go: policy.cost_to_go(t, &x).unwrap_or(f64::NAN),
            fuel,
        });
    }
    Ok(RolloutResult {
        states,
        cost_to_go: costs,
        fuel: fuels,
        termination,
        trace,
    })
}
