//! Direct transcription of the optimal control problem with forward-Euler
//! defects and a shared, bounded knot spacing.
//!
//! Decision vector layout: `[x_0 … x_N, u_0 … u_{N−1}, Δt]`.
//!
//! ```text
//! min  Σ_k Δt (w_t + u_kᵀ W_u u_k) + x_Nᵀ W_xf x_N
//! s.t. x_{k+1} − x_k − Δt f(x_k, u_k) = 0
//!      box bounds on q, q̇, u and Δt; pinned boundary and waypoint knots
//! ```
//!
//! Pins are imposed by collapsing the variable bounds, so they hold exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{jacobians, Plant};
use crate::error::{Error, Result};
use crate::linalg::BandSpd;
use crate::optim::{solve_augmented_lagrangian, AlOptions, NlpProblem};
use crate::trajectory::Trajectory;

/// Smallest and largest admissible knot spacing (s).
pub const DT_RANGE: (f64, f64) = (0.01, 0.2);

#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    /// Running weight on elapsed time.
    pub time: f64,
    /// `W_u`, input-dim square.
    pub effort: DMatrix<f64>,
    /// `W_xf`, state-dim square.
    pub terminal: DMatrix<f64>,
}

impl CostWeights {
    pub fn validate(&self, nx: usize, nu: usize) -> Result<()> {
        if !(self.time >= 0.0) {
            return Err(Error::Config("time weight must be non-negative".into()));
        }
        for (name, m, dim) in [("effort", &self.effort, nu), ("terminal", &self.terminal, nx)] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Config(format!(
                    "{name} weight must be {dim}×{dim}, got {}×{}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            if crate::linalg::asymmetry(m) > 1e-12 * (1.0 + crate::linalg::max_abs(m)) {
                return Err(Error::Config(format!("{name} weight must be symmetric")));
            }
            if crate::linalg::min_eigenvalue(m) < -1e-12 * (1.0 + crate::linalg::max_abs(m)) {
                return Err(Error::Config(format!("{name} weight must be positive semi-definite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub knot: usize,
    pub q: Vec<f64>,
}

/// Box limits, boundary conditions and waypoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qd_min: Vec<f64>,
    pub qd_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub q0: Vec<f64>,
    pub qd0: Vec<f64>,
    #[serde(default)]
    pub qf: Option<Vec<f64>>,
    #[serde(default)]
    pub qdf: Option<Vec<f64>>,
    #[serde(default)]
    pub waypoints: Vec<Waypoint>,
    #[serde(default = "default_dt_min")]
    pub dt_min: f64,
    #[serde(default = "default_dt_max")]
    pub dt_max: f64,
}

fn default_dt_min() -> f64 {
    DT_RANGE.0
}

fn default_dt_max() -> f64 {
    DT_RANGE.1
}

impl Bounds {
    /// Unbounded states, symmetric input limits, rest-to-rest boundary conditions.
    pub fn rest_to_rest(q0: Vec<f64>, qf: Vec<f64>, u_max: Vec<f64>) -> Self {
        let n = q0.len();
        Self {
            q_min: vec![f64::NEG_INFINITY; n],
            q_max: vec![f64::INFINITY; n],
            qd_min: vec![f64::NEG_INFINITY; n],
            qd_max: vec![f64::INFINITY; n],
            u_min: u_max.iter().map(|v| -v).collect(),
            u_max,
            q0,
            qd0: vec![0.0; n],
            qf: Some(qf),
            qdf: Some(vec![0.0; n]),
            waypoints: Vec::new(),
            dt_min: DT_RANGE.0,
            dt_max: DT_RANGE.1,
        }
    }

    pub fn validate(&self, dof: usize, nu: usize, intervals: usize) -> Result<()> {
        let dims: [(&str, usize, usize); 8] = [
            ("q_min", self.q_min.len(), dof),
            ("q_max", self.q_max.len(), dof),
            ("qd_min", self.qd_min.len(), dof),
            ("qd_max", self.qd_max.len(), dof),
            ("u_min", self.u_min.len(), nu),
            ("u_max", self.u_max.len(), nu),
            ("q0", self.q0.len(), dof),
            ("qd0", self.qd0.len(), dof),
        ];
        for (name, got, want) in dims {
            if got != want {
                return Err(Error::Config(format!("{name} has length {got}, expected {want}")));
            }
        }
        for (name, lo, hi) in [
            ("q", &self.q_min, &self.q_max),
            ("qd", &self.qd_min, &self.qd_max),
            ("u", &self.u_min, &self.u_max),
        ] {
            if let Some(i) = (0..lo.len()).find(|&i| !(lo[i] <= hi[i])) {
                return Err(Error::Config(format!(
                    "{name}_min[{i}] = {} exceeds {name}_max[{i}] = {}",
                    lo[i], hi[i]
                )));
            }
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!(
                "knot spacing bounds [{}, {}] are invalid",
                self.dt_min, self.dt_max
            )));
        }
        if self.dt_min < DT_RANGE.0 - 1e-12 || self.dt_max > DT_RANGE.1 + 1e-12 {
            return Err(Error::Config(format!(
                "knot spacing bounds must lie within [{}, {}]",
                DT_RANGE.0, DT_RANGE.1
            )));
        }
        for (name, v) in [("qf", &self.qf), ("qdf", &self.qdf)] {
            if let Some(v) = v {
                if v.len() != dof {
                    return Err(Error::Config(format!("{name} has length {}, expected {dof}", v.len())));
                }
            }
        }
        for wp in &self.waypoints {
            if wp.knot > intervals {
                return Err(Error::Config(format!(
                    "waypoint knot {} beyond final knot {intervals}",
                    wp.knot
                )));
            }
            if wp.q.len() != dof {
                return Err(Error::Config(format!("waypoint at knot {} has wrong length", wp.knot)));
            }
        }
        Ok(())
    }

    /// Knot-indexed position pins (boundary and waypoints).
    fn position_pins(&self, intervals: usize) -> Vec<(usize, &[f64])> {
        let mut pins: Vec<(usize, &[f64])> = vec![(0, self.q0.as_slice())];
        if let Some(qf) = &self.qf {
            pins.push((intervals, qf.as_slice()));
        }
        for wp in &self.waypoints {
            pins.push((wp.knot, wp.q.as_slice()));
        }
        pins
    }
}

/// The transcribed nonlinear program.
pub struct TranscribedProgram<'a, P: Plant + ?Sized> {
    plant: &'a P,
    weights: CostWeights,
    bounds: Bounds,
    intervals: usize,
    dt_init: f64,
    nx: usize,
    nu: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Per-interval `(A_k, B_k, f_k)`.
pub struct DefectJacobian {
    blocks: Vec<(DMatrix<f64>, DMatrix<f64>, DVector<f64>)>,
    dt: f64,
}

/// Build the nonlinear program for `intervals` knot intervals.
pub fn transcribe<'a, P: Plant + ?Sized>(
    plant: &'a P,
    weights: CostWeights,
    bounds: Bounds,
    intervals: usize,
    dt_init: f64,
) -> Result<TranscribedProgram<'a, P>> {
    let dof = plant.dof();
    let nx = plant.state_dim();
    let nu = plant.input_dim();
    if intervals < 2 {
        return Err(Error::Config(format!("need at least 2 intervals, got {intervals}")));
    }
    weights.validate(nx, nu)?;
    bounds.validate(dof, nu, intervals)?;
    if !(dt_init >= bounds.dt_min && dt_init <= bounds.dt_max) {
        return Err(Error::Config(format!(
            "initial knot spacing {dt_init} outside [{}, {}]",
            bounds.dt_min, bounds.dt_max
        )));
    }

    let nvar = (intervals + 1) * nx + intervals * nu + 1;
    let mut lo = vec![0.0; nvar];
    let mut hi = vec![0.0; nvar];
    for k in 0..=intervals {
        let base = k * nx;
        for i in 0..dof {
            lo[base + i] = bounds.q_min[i];
            hi[base + i] = bounds.q_max[i];
            lo[base + dof + i] = bounds.qd_min[i];
            hi[base + dof + i] = bounds.qd_max[i];
        }
    }
    let ubase = (intervals + 1) * nx;
    for k in 0..intervals {
        for i in 0..nu {
            lo[ubase + k * nu + i] = bounds.u_min[i];
            hi[ubase + k * nu + i] = bounds.u_max[i];
        }
    }
    lo[nvar - 1] = bounds.dt_min;
    hi[nvar - 1] = bounds.dt_max;

    let mut pin = |idx: usize, value: f64, what: String| -> Result<()> {
        if value < lo[idx] || value > hi[idx] {
            return Err(Error::Config(format!(
                "{what} = {value} lies outside its bounds [{}, {}]",
                lo[idx], hi[idx]
            )));
        }
        lo[idx] = value;
        hi[idx] = value;
        Ok(())
    };
    for (k, q) in bounds.position_pins(intervals) {
        for (i, v) in q.iter().enumerate() {
            pin(k * nx + i, *v, format!("q[{i}] at knot {k}"))?;
        }
    }
    for (i, v) in bounds.qd0.iter().enumerate() {
        pin(dof + i, *v, format!("qd0[{i}]"))?;
    }
    if let Some(qdf) = &bounds.qdf {
        for (i, v) in qdf.iter().enumerate() {
            pin(intervals * nx + dof + i, *v, format!("qdf[{i}]"))?;
        }
    }

    Ok(TranscribedProgram {
        plant,
        weights,
        bounds,
        intervals,
        dt_init,
        nx,
        nu,
        lo,
        hi,
    })
}

impl<P: Plant + ?Sized> TranscribedProgram<'_, P> {
    pub fn intervals(&self) -> usize {
        self.intervals
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn weights(&self) -> &CostWeights {
        &self.weights
    }

    fn state(&self, z: &[f64], k: usize) -> DVector<f64> {
        DVector::from_column_slice(&z[k * self.nx..(k + 1) * self.nx])
    }

    fn control(&self, z: &[f64], k: usize) -> DVector<f64> {
        let base = (self.intervals + 1) * self.nx + k * self.nu;
        DVector::from_column_slice(&z[base..base + self.nu])
    }

    /// Piecewise-linear interpolation of positions through the pinned knots,
    /// linear interpolation of boundary velocities, zero controls.
    pub fn initial_guess(&self) -> Vec<f64> {
        let dof = self.plant.dof();
        let n = self.intervals;
        let mut pins: Vec<(usize, Vec<f64>)> = self
            .bounds
            .position_pins(n)
            .into_iter()
            .map(|(k, q)| (k, q.to_vec()))
            .collect();
        if self.bounds.qf.is_none() {
            pins.push((n, self.bounds.q0.clone()));
        }
        pins.sort_by_key(|(k, _)| *k);
        pins.dedup_by_key(|(k, _)| *k);
        let qdf = self.bounds.qdf.clone().unwrap_or_else(|| self.bounds.qd0.clone());

        let mut z = vec![0.0; self.lo.len()];
        for k in 0..=n {
            let seg = pins.windows(2).find(|w| w[0].0 <= k && k <= w[1].0);
            let q: Vec<f64> = match seg {
                Some(w) if w[1].0 > w[0].0 => {
                    let s = (k - w[0].0) as f64 / (w[1].0 - w[0].0) as f64;
                    (0..dof).map(|i| w[0].1[i] + s * (w[1].1[i] - w[0].1[i])).collect()
                }
                Some(w) => w[0].1.clone(),
                None => pins.last().map(|p| p.1.clone()).unwrap_or_else(|| vec![0.0; dof]),
            };
            let s = k as f64 / n as f64;
            for i in 0..dof {
                z[k * self.nx + i] = q[i];
                z[k * self.nx + dof + i] = self.bounds.qd0[i] + s * (qdf[i] - self.bounds.qd0[i]);
            }
        }
        let last = z.len() - 1;
        z[last] = self.dt_init;
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lo[i], self.hi[i]);
        }
        z
    }

    /// Pack a trajectory into a decision vector.
    pub fn pack(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.intervals() != self.intervals
            || traj.state_dim() != self.nx
            || traj.input_dim() != self.nu
        {
            return Err(Error::Input("trajectory does not match the program's shape".into()));
        }
        let mut z = Vec::with_capacity(self.lo.len());
        for x in &traj.states {
            z.extend(x.iter());
        }
        for u in &traj.controls {
            z.extend(u.iter());
        }
        z.push(traj.dt);
        Ok(z)
    }

    pub fn unpack(&self, z: &[f64]) -> Result<Trajectory> {
        let states = (0..=self.intervals).map(|k| self.state(z, k)).collect();
        let controls = (0..self.intervals).map(|k| self.control(z, k)).collect();
        Trajectory::new(z[z.len() - 1], states, controls)
    }
}

impl<P: Plant + ?Sized> NlpProblem for TranscribedProgram<'_, P> {
    type Jacobian = DefectJacobian;

    fn num_vars(&self) -> usize {
        self.lo.len()
    }

    fn num_constraints(&self) -> usize {
        self.intervals * self.nx
    }

    fn lower_bounds(&self) -> &[f64] {
        &self.lo
    }

    fn upper_bounds(&self) -> &[f64] {
        &self.hi
    }

    fn objective(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let dt = z[z.len() - 1];
        let mut running = 0.0;
        let mut grad = grad;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        let ubase = (self.intervals + 1) * self.nx;
        for k in 0..self.intervals {
            let u = self.control(z, k);
            let wu = &self.weights.effort * &u;
            running += self.weights.time + u.dot(&wu);
            if let Some(g) = grad.as_deref_mut() {
                for i in 0..self.nu {
                    g[ubase + k * self.nu + i] = 2.0 * dt * wu[i];
                }
            }
        }
        let xf = self.state(z, self.intervals);
        let wx = &self.weights.terminal * &xf;
        if let Some(g) = grad {
            let last = g.len() - 1;
            g[last] = running;
            for i in 0..self.nx {
                g[self.intervals * self.nx + i] = 2.0 * wx[i];
            }
        }
        dt * running + xf.dot(&wx)
    }

    fn constraints(&self, z: &[f64], c: &mut [f64]) {
        let dt = z[z.len() - 1];
        let nx = self.nx;
        for k in 0..self.intervals {
            let x = self.state(z, k);
            let f = self.plant.state_derivative(&x, &self.control(z, k));
            for i in 0..nx {
                c[k * nx + i] = z[(k + 1) * nx + i] - z[k * nx + i] - dt * f[i];
            }
        }
    }

    fn jacobian(&self, z: &[f64]) -> DefectJacobian {
        let blocks = (0..self.intervals)
            .map(|k| {
                let x = self.state(z, k);
                let u = self.control(z, k);
                let (a, b) = jacobians(self.plant, &x, &u);
                let f = self.plant.state_derivative(&x, &u);
                (a, b, f)
            })
            .collect();
        DefectJacobian {
            blocks,
            dt: z[z.len() - 1],
        }
    }

    fn jacobian_transpose_mul(&self, jac: &DefectJacobian, v: &[f64], out: &mut [f64]) {
        let nx = self.nx;
        let nu = self.nu;
        let ubase = (self.intervals + 1) * nx;
        let last = out.len() - 1;
        for (k, (a, b, f)) in jac.blocks.iter().enumerate() {
            let vk = DVector::from_column_slice(&v[k * nx..(k + 1) * nx]);
            let at_v = a.tr_mul(&vk);
            let bt_v = b.tr_mul(&vk);
            for i in 0..nx {
                out[(k + 1) * nx + i] += vk[i];
                out[k * nx + i] -= vk[i] + jac.dt * at_v[i];
            }
            for i in 0..nu {
                out[ubase + k * nu + i] -= jac.dt * bt_v[i];
            }
            out[last] -= f.dot(&vk);
        }
    }

    fn supports_newton(&self) -> bool {
        true
    }

    /// Gauss–Newton step on the interleaved ordering `[x_0, u_0, x_1, …, x_N]`,
    /// which makes the Hessian banded, with the knot spacing as a border.
    fn newton_direction(
        &self,
        z: &[f64],
        jac: &DefectJacobian,
        _lambda: &[f64],
        mu: f64,
        grad: &[f64],
        free: &[bool],
        damping: f64,
    ) -> Option<Vec<f64>> {
        let nx = self.nx;
        let nu = self.nu;
        let n = self.intervals;
        let stride = nx + nu;
        let nb = n * stride + nx;
        let ubase = (n + 1) * nx;
        let last = z.len() - 1;
        let dt = jac.dt;
        // interleaved index → decision-vector index
        let to_z = |j: usize| -> usize {
            let (k, r) = (j / stride, j % stride);
            if r < nx { k * nx + r } else { ubase + k * nu + (r - nx) }
        };

        let mut h = BandSpd::zeros(nb, 2 * nx + nu - 1);
        let mut border = vec![0.0; nb];
        let mut h_tt = damping;
        let width = 2 * nx + nu;
        for (k, (a, b, f)) in jac.blocks.iter().enumerate() {
            // J_loc = [−I − Δt·A, −Δt·B, I]
            let mut jl = DMatrix::<f64>::zeros(nx, width);
            for r in 0..nx {
                for c in 0..nx {
                    jl[(r, c)] = -dt * a[(r, c)];
                }
                jl[(r, r)] -= 1.0;
                for c in 0..nu {
                    jl[(r, nx + c)] = -dt * b[(r, c)];
                }
                jl[(r, nx + nu + r)] = 1.0;
            }
            let jtj = jl.tr_mul(&jl);
            let jtf = jl.tr_mul(f);
            let off = k * stride;
            for r in 0..width {
                for c in 0..=r {
                    h.add(off + r, off + c, mu * jtj[(r, c)]);
                }
                border[off + r] -= mu * jtf[r];
            }
            h_tt += mu * f.dot(f);
            let u = self.control(z, k);
            let wu = &self.weights.effort * &u;
            for r in 0..nu {
                for c in 0..=r {
                    h.add(off + nx + r, off + nx + c, 2.0 * dt * self.weights.effort[(r, c)]);
                }
                border[off + nx + r] += 2.0 * wu[r];
            }
        }
        let off = n * stride;
        for r in 0..nx {
            for c in 0..=r {
                h.add(off + r, off + c, 2.0 * self.weights.terminal[(r, c)]);
            }
        }
        let mut rhs = vec![0.0; nb];
        for j in 0..nb {
            let zj = to_z(j);
            if free[zj] {
                h.add(j, j, damping);
                rhs[j] = -grad[zj];
            } else {
                h.pin_identity(j);
                border[j] = 0.0;
            }
        }
        if !h.factorize() {
            return None;
        }
        let y1 = h.solve_factored(&rhs);
        let (db, d_dt) = if free[last] {
            let y2 = h.solve_factored(&border);
            let schur = h_tt - border.iter().zip(&y2).map(|(a, b)| a * b).sum::<f64>();
            if !(schur > 0.0) {
                return None;
            }
            let r_t = -grad[last] - border.iter().zip(&y1).map(|(a, b)| a * b).sum::<f64>();
            let d_dt = r_t / schur;
            (y1.iter().zip(&y2).map(|(a, b)| a - b * d_dt).collect::<Vec<_>>(), d_dt)
        } else {
            (y1, 0.0)
        };
        let mut d = vec![0.0; z.len()];
        for (j, v) in db.into_iter().enumerate() {
            d[to_z(j)] = v;
        }
        d[last] = d_dt;
        d.iter().all(|v| v.is_finite()).then_some(d)
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub trajectory: Trajectory,
    pub objective: f64,
    pub iterations: usize,
    pub inner_iterations: usize,
    /// Final penalty parameter.
    pub penalty: f64,
    pub violation: f64,
    pub stationarity: f64,
    pub infeasibility_history: Vec<f64>,
}

/// Solver tolerances promised to callers.
pub const FEASIBILITY_TOL: f64 = 1e-6;
pub const STATIONARITY_TOL: f64 = 1e-4;

/// Solve the transcribed program; `initial` defaults to [`TranscribedProgram::initial_guess`].
pub fn solve<P: Plant + ?Sized>(
    program: &TranscribedProgram<'_, P>,
    initial: Option<&Trajectory>,
) -> Result<SolveReport> {
    solve_with(program, initial, &AlOptions {
        feasibility_tol: 0.1 * FEASIBILITY_TOL,
        stationarity_tol: STATIONARITY_TOL,
        ..AlOptions::default()
    })
}

pub fn solve_with<P: Plant + ?Sized>(
    program: &TranscribedProgram<'_, P>,
    initial: Option<&Trajectory>,
    opts: &AlOptions,
) -> Result<SolveReport> {
    let z0 = match initial {
        Some(t) => program.pack(t)?,
        None => program.initial_guess(),
    };
    let report = solve_augmented_lagrangian(program, &z0, opts)?;
    Ok(SolveReport {
        trajectory: program.unpack(&report.z)?,
        objective: report.objective,
        iterations: report.outer_iterations,
        inner_iterations: report.inner_iterations,
        penalty: report.penalty,
        violation: report.violation,
        stationarity: report.stationarity,
        infeasibility_history: report.infeasibility_history,
    })
}

/// Constraint residuals of a trajectory, evaluated directly from its knots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub max_defect: f64,
    pub max_bound_violation: f64,
    pub max_pin_violation: f64,
}

impl FeasibilityReport {
    pub fn max(&self) -> f64 {
        self.max_defect.max(self.max_bound_violation).max(self.max_pin_violation)
    }
}

pub fn check_feasibility<P: Plant + ?Sized>(
    plant: &P,
    bounds: &Bounds,
    traj: &Trajectory,
) -> FeasibilityReport {
    let dof = plant.dof();
    let n = traj.intervals();
    let max_defect = traj.max_euler_defect(plant);

    let excess = |v: f64, lo: f64, hi: f64| (lo - v).max(v - hi).max(0.0);
    let mut bound = excess(traj.dt, bounds.dt_min, bounds.dt_max);
    for x in &traj.states {
        for i in 0..dof {
            bound = bound
                .max(excess(x[i], bounds.q_min[i], bounds.q_max[i]))
                .max(excess(x[dof + i], bounds.qd_min[i], bounds.qd_max[i]));
        }
    }
    for u in &traj.controls {
        for i in 0..u.len() {
            bound = bound.max(excess(u[i], bounds.u_min[i], bounds.u_max[i]));
        }
    }

    let mut pin = 0.0_f64;
    let mut check = |k: usize, offset: usize, v: &[f64]| {
        for (i, val) in v.iter().enumerate() {
            pin = pin.max((traj.states[k][offset + i] - val).abs());
        }
    };
    check(0, 0, &bounds.q0);
    check(0, dof, &bounds.qd0);
    if let Some(qf) = &bounds.qf {
        check(n, 0, qf);
    }
    if let Some(qdf) = &bounds.qdf {
        check(n, dof, qdf);
    }
    for wp in &bounds.waypoints {
        check(wp.knot, 0, &wp.q);
    }
    FeasibilityReport {
        max_defect,
        max_bound_violation: bound,
        max_pin_violation: pin,
    }
}
