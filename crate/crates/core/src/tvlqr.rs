//! Time-varying LQR along a nominal trajectory.
//!
//! The feedback law is `u = u*(t) − K(t)(x − x*(t))` with `K = R⁻¹BᵀS`, and
//! `S(t)` solves the differential Riccati equation
//! `−Ṡ = SA + AᵀS − SBR⁻¹BᵀS + Q`, integrated backwards from `S(t_f) = Q_f`.
//!
//! Between knots the gain and the nominal control are held (zero-order hold)
//! while the nominal state is interpolated linearly.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Linearization;
use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, quad_form, solve_care, symmetrize, CareSolution};
use crate::trajectory::Trajectory;

/// Minimum number of RK4 substeps per knot interval.
pub const MIN_SUBSTEPS: usize = 10;

#[derive(Debug, Clone)]
pub struct TvlqrPolicy {
    pub trajectory: Trajectory,
    /// Cost-to-go matrices, one per knot.
    pub s: Vec<DMatrix<f64>>,
    /// Gains `R⁻¹ B_kᵀ S_k`, one per knot.
    pub k: Vec<DMatrix<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvlqrOptions {
    pub substeps: usize,
}

impl Default for TvlqrOptions {
    fn default() -> Self {
        Self {
            substeps: MIN_SUBSTEPS,
        }
    }
}

fn check_weights(q: &DMatrix<f64>, r: &DMatrix<f64>, nx: usize, nu: usize) -> Result<DMatrix<f64>> {
    if q.shape() != (nx, nx) || r.shape() != (nu, nu) {
        return Err(Error::Config(format!(
            "weights must be {nx}×{nx} and {nu}×{nu}, got {:?} and {:?}",
            q.shape(),
            r.shape()
        )));
    }
    check_psd("Q", q)?;
    if (r - r.transpose()).amax() > 1e-12 * (1.0 + r.amax()) {
        return Err(Error::Config("R must be symmetric".into()));
    }
    r.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Config("R must be positive definite".into()))
}

fn check_psd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if (m - m.transpose()).amax() > 1e-10 * (1.0 + m.amax()) {
        return Err(Error::Config(format!("{name} must be symmetric")));
    }
    if min_eigenvalue(m) < -1e-10 * (1.0 + m.amax()) {
        return Err(Error::Config(format!("{name} must be positive semi-definite")));
    }
    Ok(())
}

/// Right-hand side `Ṡ = −(SA + AᵀS − S B R⁻¹ Bᵀ S + Q)`.
pub fn riccati_derivative(
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let sb = s * b;
    -(s * a + a.tr_mul(s) - &sb * r_inv * sb.transpose() + q)
}

/// Infinite-horizon LQR about the final knot of `lin`.
pub fn terminal_lqr(lin: &Linearization, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CareSolution> {
    let last = lin
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Input("empty linearization".into()))?;
    solve_care(&lin.a[last], &lin.b[last], q, r)
}

/// Backward Riccati sweep with the default number of substeps.
pub fn solve_tvlqr(
    trajectory: &Trajectory,
    lin: &Linearization,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
) -> Result<TvlqrPolicy> {
    solve_tvlqr_with(trajectory, lin, q, r, q_f, TvlqrOptions::default())
}

pub fn solve_tvlqr_with(
    trajectory: &Trajectory,
    lin: &Linearization,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q_f: &DMatrix<f64>,
    opts: TvlqrOptions,
) -> Result<TvlqrPolicy> {
    let nx = trajectory.state_dim();
    let nu = trajectory.input_dim();
    let knots = trajectory.len();
    if lin.len() != knots {
        return Err(Error::Input(format!(
            "linearization has {} knots, trajectory has {knots}",
            lin.len()
        )));
    }
    if lin.a.iter().any(|a| a.shape() != (nx, nx)) || lin.b.iter().any(|b| b.shape() != (nx, nu)) {
        return Err(Error::Input("linearization shapes do not match the trajectory".into()));
    }
    if opts.substeps < MIN_SUBSTEPS {
        return Err(Error::Config(format!(
            "at least {MIN_SUBSTEPS} Riccati substeps per interval are required, got {}",
            opts.substeps
        )));
    }
    let r_inv = check_weights(q, r, nx, nu)?;
    if q_f.shape() != (nx, nx) {
        return Err(Error::Config(format!("Q_f must be {nx}×{nx}")));
    }
    check_psd("Q_f", q_f)?;

    let n = knots - 1;
    let dt = trajectory.dt;
    let h = dt / opts.substeps as f64;
    let mut s_all = vec![DMatrix::zeros(nx, nx); knots];
    let mut s = q_f.clone();
    symmetrize(&mut s);
    s_all[n] = s.clone();
    for k in (0..n).rev() {
        // A(t), B(t) linear in t on [t_k, t_{k+1}]; τ = 1 at t_{k+1}
        let at = |tau: f64| (&lin.a[k] * (1.0 - tau) + &lin.a[k + 1] * tau, &lin.b[k] * (1.0 - tau) + &lin.b[k + 1] * tau);
        for i in (0..opts.substeps).rev() {
            let tau1 = (i + 1) as f64 / opts.substeps as f64;
            let tau_mid = (i as f64 + 0.5) / opts.substeps as f64;
            let tau0 = i as f64 / opts.substeps as f64;
            let (a1, b1) = at(tau1);
            let (am, bm) = at(tau_mid);
            let (a0, b0) = at(tau0);
            // integrate backwards: dS/d(−t) = −Ṡ
            let k1 = -riccati_derivative(&s, &a1, &b1, q, &r_inv);
            let k2 = -riccati_derivative(&(&s + &k1 * (h / 2.0)), &am, &bm, q, &r_inv);
            let k3 = -riccati_derivative(&(&s + &k2 * (h / 2.0)), &am, &bm, q, &r_inv);
            let k4 = -riccati_derivative(&(&s + &k3 * h), &a0, &b0, q, &r_inv);
            s += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            symmetrize(&mut s);
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "Riccati solution became non-finite at knot {k}; use more substeps"
            )));
        }
        let lam = min_eigenvalue(&s);
        if lam < -1e-8 * (1.0 + s.amax()) {
            return Err(Error::Numerical(format!(
                "Riccati solution lost positive semi-definiteness at knot {k} (λ_min = {lam:e}); use more substeps"
            )));
        }
        s_all[k] = s.clone();
    }
    let k_all = s_all
        .iter()
        .zip(&lin.b)
        .map(|(s, b)| &r_inv * b.tr_mul(s))
        .collect();
    Ok(TvlqrPolicy {
        trajectory: trajectory.clone(),
        s: s_all,
        k: k_all,
        q: q.clone(),
        r: r.clone(),
        q_f: q_f.clone(),
    })
}

impl TvlqrPolicy {
    pub fn knots(&self) -> usize {
        self.s.len()
    }

    pub fn state_dim(&self) -> usize {
        self.trajectory.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.trajectory.input_dim()
    }

    pub fn duration(&self) -> f64 {
        self.trajectory.duration()
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let tf = self.duration();
        if !(t >= -1e-12 * tf && t <= tf * (1.0 + 1e-12)) {
            return Err(Error::Input(format!("time {t} outside the horizon [0, {tf}]")));
        }
        Ok(())
    }

    /// Index of the interval containing `t` (the last interval at `t_f`).
    pub fn segment(&self, t: f64) -> Result<usize> {
        self.check_time(t)?;
        let n = self.trajectory.intervals();
        Ok(((t / self.trajectory.dt).floor().max(0.0) as usize).min(n - 1))
    }

    /// Nominal state at `t`, linearly interpolated.
    pub fn nominal_state(&self, t: f64) -> Result<DVector<f64>> {
        let k = self.segment(t)?;
        Ok(self.nominal_state_in(k, t))
    }

    fn nominal_state_in(&self, k: usize, t: f64) -> DVector<f64> {
        let tau = ((t - self.trajectory.time(k)) / self.trajectory.dt).clamp(0.0, 1.0);
        let xs = &self.trajectory.states;
        &xs[k] * (1.0 - tau) + &xs[k + 1] * tau
    }

    /// `u*(t) − K(t)(x − x*(t))`.
    pub fn feedback(&self, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.segment(t)?;
        self.feedback_in_segment(k, t, x)
    }

    /// The feedback law using interval `k`'s gain and nominal control, also
    /// at the interval's right end.
    pub fn feedback_in_segment(&self, k: usize, t: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        if k >= self.trajectory.intervals() {
            return Err(Error::Input(format!("interval {k} out of range")));
        }
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "feedback state",
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        let xbar = x - self.nominal_state_in(k, t);
        Ok(&self.trajectory.controls[k] - &self.k[k] * xbar)
    }

    /// `x̄ᵀ S(t) x̄`, with `S` interpolated linearly between knots.
    pub fn cost_to_go(&self, t: f64, x: &DVector<f64>) -> Result<f64> {
        let k = self.segment(t)?;
        let tau = ((t - self.trajectory.time(k)) / self.trajectory.dt).clamp(0.0, 1.0);
        let s = &self.s[k] * (1.0 - tau) + &self.s[k + 1] * tau;
        let xbar = x - self.nominal_state_in(k, t);
        Ok(quad_form(&s, &xbar))
    }

    /// `x̄ᵀ S_k x̄` at knot `k`.
    pub fn cost_to_go_at_knot(&self, k: usize, x: &DVector<f64>) -> Result<f64> {
        if k >= self.knots() {
            return Err(Error::Input(format!("knot {k} out of range")));
        }
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "cost-to-go state",
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        Ok(quad_form(&self.s[k], &(x - &self.trajectory.states[k])))
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &PolicyFile::from(self))?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: PolicyFile = serde_json::from_reader(reader)?;
        file.into_policy()
    }
}

/// On-disk policy. Matrices are flattened row-major; per-knot arrays are
/// indexed by knot.
#[derive(Debug, Serialize, Deserialize)]
struct PolicyFile {
    version: u32,
    state_dim: usize,
    input_dim: usize,
    dt: f64,
    knot_times: Vec<f64>,
    nominal_states: Vec<Vec<f64>>,
    /// one per interval
    nominal_controls: Vec<Vec<f64>>,
    s: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    q: Vec<f64>,
    r: Vec<f64>,
    q_f: Vec<f64>,
}

const POLICY_VERSION: u32 = 1;

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, data: &[f64], what: &str) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::Input(format!(
            "{what}: expected {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

impl From<&TvlqrPolicy> for PolicyFile {
    fn from(p: &TvlqrPolicy) -> Self {
        Self {
            version: POLICY_VERSION,
            state_dim: p.state_dim(),
            input_dim: p.input_dim(),
            dt: p.trajectory.dt,
            knot_times: p.trajectory.times(),
            nominal_states: p.trajectory.states.iter().map(|x| x.as_slice().to_vec()).collect(),
            nominal_controls: p.trajectory.controls.iter().map(|u| u.as_slice().to_vec()).collect(),
            s: p.s.iter().map(row_major).collect(),
            k: p.k.iter().map(row_major).collect(),
            q: row_major(&p.q),
            r: row_major(&p.r),
            q_f: row_major(&p.q_f),
        }
    }
}

impl PolicyFile {
    fn into_policy(self) -> Result<TvlqrPolicy> {
        if self.version != POLICY_VERSION {
            return Err(Error::Input(format!("unsupported policy version {}", self.version)));
        }
        let (nx, nu) = (self.state_dim, self.input_dim);
        let states = self
            .nominal_states
            .into_iter()
            .map(DVector::from_vec)
            .collect::<Vec<_>>();
        let controls = self
            .nominal_controls
            .into_iter()
            .map(DVector::from_vec)
            .collect::<Vec<_>>();
        if states.iter().any(|x| x.len() != nx) || controls.iter().any(|u| u.len() != nu) {
            return Err(Error::Input("policy nominal knots have the wrong dimension".into()));
        }
        let trajectory = Trajectory::new(self.dt, states, controls)?;
        let knots = trajectory.len();
        if self.s.len() != knots || self.k.len() != knots || self.knot_times.len() != knots {
            return Err(Error::Input(format!("policy must carry {knots} S/K entries")));
        }
        let s = self
            .s
            .iter()
            .enumerate()
            .map(|(i, d)| from_row_major(nx, nx, d, &format!("S[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        let k = self
            .k
            .iter()
            .enumerate()
            .map(|(i, d)| from_row_major(nu, nx, d, &format!("K[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        Ok(TvlqrPolicy {
            trajectory,
            s,
            k,
            q: from_row_major(nx, nx, &self.q, "Q")?,
            r: from_row_major(nu, nu, &self.r, "R")?,
            q_f: from_row_major(nx, nx, &self.q_f, "Q_f")?,
        })
    }
}
