//! Planar floating-base multibody dynamics.
//!
//! Generalized coordinates are `q = [x, y, θ, q₁ … qₙ]`: base position and
//! heading in the inertial frame followed by the revolute joint angles of a
//! serial arm. Generalized forces are `u = [f_x, f_y, τ_z, τ₁ … τₙ]` with the
//! base forces expressed in the inertial frame. There is no gravity.
//!
//! Every body's centre-of-mass position is a sum of rigid segments, each
//! fixed in one of the chain frames (frame 0 is the base, frame `i` the
//! `i`-th link). That representation gives the body Jacobians and the
//! velocity-product accelerations in closed form, from which
//! `M = Σ mᵢ Jᵥᵢᵀ Jᵥᵢ + Iᵢ J_ωᵢᵀ J_ωᵢ` and `C = Σ mᵢ Jᵥᵢᵀ J̇ᵥᵢ q̇`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::trajectory::Trajectory;

/// A fully actuated second-order system `M(q) q̈ + C(q, q̇) = u`.
///
/// The state is `x = [q, q̇]`.
pub trait Plant: Send + Sync {
    /// Number of generalized coordinates.
    fn dof(&self) -> usize;

    fn input_dim(&self) -> usize {
        self.dof()
    }

    fn state_dim(&self) -> usize {
        2 * self.dof()
    }

    /// `q̈` for the given positions, velocities and generalized forces.
    ///
    /// Implementations return non-finite values instead of failing so that
    /// simulations can classify the rollout as diverged.
    fn acceleration(&self, q: &[f64], qd: &[f64], u: &[f64]) -> DVector<f64>;

    /// `ẋ = [q̇, q̈]`.
    fn state_derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.dof();
        let (q, qd) = x.as_slice().split_at(n);
        let qdd = self.acceleration(q, qd, u.as_slice());
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from_slice(qd);
        out.rows_mut(n, n).copy_from(&qdd);
        out
    }
}

/// Generalized positions and velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl State {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Result<Self> {
        check_dim("state velocity", q.len(), qd.len())?;
        Ok(Self { q, qd })
    }

    pub fn zeros(dof: usize) -> Self {
        Self {
            q: DVector::zeros(dof),
            qd: DVector::zeros(dof),
        }
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if !x.len().is_multiple_of(2) {
            return Err(Error::Input(format!("state vector has odd length {}", x.len())));
        }
        let n = x.len() / 2;
        Ok(Self {
            q: x.rows(0, n).into_owned(),
            qd: x.rows(n, n).into_owned(),
        })
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.q.len();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&self.q);
        x.rows_mut(n, n).copy_from(&self.qd);
        x
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }
}

/// One revolute link of the arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// kg
    pub mass: f64,
    /// kg·m², about the link's centre of mass
    pub inertia: f64,
    /// m, joint-to-joint distance
    pub length: f64,
    /// m, distance of the centre of mass from the link's proximal joint
    pub com_offset: f64,
}

/// Rigid body welded to the end of the chain (e.g. a captured target).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub mass: f64,
    pub inertia: f64,
    /// Centre-of-mass offset from the chain tip, in the last link's frame (m).
    pub offset: [f64; 2],
}

/// Planar floating base carrying a serial arm of revolute joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultibodyModel {
    pub base_mass: f64,
    pub base_inertia: f64,
    /// Location of the first joint in the base frame (m).
    #[serde(default)]
    pub mount: [f64; 2],
    #[serde(default)]
    pub links: Vec<Link>,
    #[serde(default)]
    pub payload: Option<Payload>,
}

/// Angular and linear momentum of the whole system about the inertial origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Momentum {
    /// N·m·s
    pub angular: f64,
    /// N·s
    pub linear: [f64; 2],
}

#[derive(Debug, Clone)]
struct BodyTerms {
    mass: f64,
    inertia: f64,
    /// Highest chain frame the body is fixed in.
    frame: usize,
    position: [f64; 2],
    /// Columns of the 2×dof linear-velocity Jacobian.
    jv: Vec<[f64; 2]>,
    /// `J̇ᵥ q̇`
    bias: [f64; 2],
}

#[inline]
fn rotate(angle: f64, v: [f64; 2]) -> [f64; 2] {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[inline]
fn perp(v: [f64; 2]) -> [f64; 2] {
    [-v[1], v[0]]
}

impl MultibodyModel {
    /// Single rigid body (no arm).
    pub fn rigid_body(mass: f64, inertia: f64) -> Self {
        Self {
            base_mass: mass,
            base_inertia: inertia,
            mount: [0.0, 0.0],
            links: Vec::new(),
            payload: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("base mass", self.base_mass)?;
        positive("base inertia", self.base_inertia)?;
        for (i, link) in self.links.iter().enumerate() {
            positive(&format!("link {} mass", i + 1), link.mass)?;
            positive(&format!("link {} inertia", i + 1), link.inertia)?;
            if !(link.length >= 0.0) {
                return Err(Error::Config(format!(
                    "link {} length must be non-negative, got {}",
                    i + 1,
                    link.length
                )));
            }
        }
        if let Some(p) = &self.payload {
            positive("payload mass", p.mass)?;
            positive("payload inertia", p.inertia)?;
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.links.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.base_mass
            + self.links.iter().map(|l| l.mass).sum::<f64>()
            + self.payload.as_ref().map_or(0.0, |p| p.mass)
    }

    /// Rigid segments locating each body's centre of mass relative to the base origin.
    fn segments(&self) -> Vec<(f64, f64, usize, Vec<(usize, [f64; 2])>)> {
        let mut bodies = Vec::with_capacity(self.links.len() + 2);
        bodies.push((self.base_mass, self.base_inertia, 0, Vec::new()));
        let mut chain: Vec<(usize, [f64; 2])> = vec![(0, self.mount)];
        for (i, link) in self.links.iter().enumerate() {
            let frame = i + 1;
            let mut segs = chain.clone();
            segs.push((frame, [link.com_offset, 0.0]));
            bodies.push((link.mass, link.inertia, frame, segs));
            chain.push((frame, [link.length, 0.0]));
        }
        if let Some(p) = &self.payload {
            let frame = self.links.len();
            let mut segs = chain.clone();
            segs.push((frame, p.offset));
            bodies.push((p.mass, p.inertia, frame, segs));
        }
        bodies
    }

    fn body_terms(&self, q: &[f64], qd: Option<&[f64]>) -> Vec<BodyTerms> {
        let n = self.links.len();
        let dof = 3 + n;
        let mut angles = Vec::with_capacity(n + 1);
        let mut rates = Vec::with_capacity(n + 1);
        let mut acc_angle = 0.0;
        let mut acc_rate = 0.0;
        for f in 0..=n {
            acc_angle += q[2 + f];
            angles.push(acc_angle);
            if let Some(qd) = qd {
                acc_rate += qd[2 + f];
            }
            rates.push(acc_rate);
        }

        self.segments()
            .into_iter()
            .map(|(mass, inertia, frame, segs)| {
                let mut jv = vec![[0.0, 0.0]; dof];
                jv[0] = [1.0, 0.0];
                jv[1] = [0.0, 1.0];
                let mut position = [q[0], q[1]];
                let mut bias = [0.0, 0.0];
                for (f, local) in segs {
                    let w = rotate(angles[f], local);
                    position[0] += w[0];
                    position[1] += w[1];
                    let pw = perp(w);
                    for g in 0..=f {
                        jv[2 + g][0] += pw[0];
                        jv[2 + g][1] += pw[1];
                    }
                    let r2 = rates[f] * rates[f];
                    bias[0] -= r2 * w[0];
                    bias[1] -= r2 * w[1];
                }
                BodyTerms {
                    mass,
                    inertia,
                    frame,
                    position,
                    jv,
                    bias,
                }
            })
            .collect()
    }

    fn check_q(&self, q: &[f64]) -> Result<()> {
        check_dim("generalized positions", 3 + self.links.len(), q.len())
    }

    /// Generalized mass matrix `M(q)`, `(3+n)×(3+n)` symmetric positive definite.
    pub fn mass_matrix(&self, q: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_q(q.as_slice())?;
        Ok(self.mass_matrix_unchecked(q.as_slice()))
    }

    fn mass_matrix_unchecked(&self, q: &[f64]) -> DMatrix<f64> {
        self.mass_and_bias(q, None).0
    }

    /// `M(q)` and, when velocities are given, `C(q, q̇)`, from one kinematics pass.
    fn mass_and_bias(&self, q: &[f64], qd: Option<&[f64]>) -> (DMatrix<f64>, DVector<f64>) {
        let dof = 3 + self.links.len();
        let mut m = DMatrix::<f64>::zeros(dof, dof);
        let mut c = DVector::<f64>::zeros(dof);
        for body in self.body_terms(q, qd) {
            for i in 0..dof {
                let ji = body.jv[i];
                c[i] += body.mass * (ji[0] * body.bias[0] + ji[1] * body.bias[1]);
                for j in i..dof {
                    let mut v = body.mass * (ji[0] * body.jv[j][0] + ji[1] * body.jv[j][1]);
                    if (2..=2 + body.frame).contains(&i) && (2..=2 + body.frame).contains(&j) {
                        v += body.inertia;
                    }
                    m[(i, j)] += v;
                }
            }
        }
        for i in 0..dof {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        (m, c)
    }

    /// Coriolis/centrifugal generalized forces `C(q, q̇)`.
    pub fn bias_forces(&self, q: &DVector<f64>, qd: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_q(q.as_slice())?;
        check_dim("generalized velocities", q.len(), qd.len())?;
        Ok(self.bias_forces_unchecked(q.as_slice(), qd.as_slice()))
    }

    fn bias_forces_unchecked(&self, q: &[f64], qd: &[f64]) -> DVector<f64> {
        self.mass_and_bias(q, Some(qd)).1
    }

    /// `q̈ = M⁻¹(u − C)`.
    pub fn forward_dynamics(&self, state: &State, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_q(state.q.as_slice())?;
        check_dim("generalized velocities", state.q.len(), state.qd.len())?;
        check_dim("generalized forces", state.q.len(), u.len())?;
        let (m, c) = self.mass_and_bias(state.q.as_slice(), Some(state.qd.as_slice()));
        let rhs = u - c;
        match m.clone().cholesky() {
            Some(ch) => Ok(ch.solve(&rhs)),
            None => {
                let eig = m.symmetric_eigen().eigenvalues;
                let max = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
                Err(Error::SingularMassMatrix {
                    condition: max / min,
                })
            }
        }
    }

    /// Total momentum about the inertial origin.
    ///
    /// The base rows of `M q̇` give the linear momentum and the angular
    /// momentum about the base origin; the latter is shifted to the inertial
    /// origin so that it is conserved under zero external forces.
    pub fn momentum(&self, state: &State) -> Result<Momentum> {
        let m = self.mass_matrix(&state.q)?;
        check_dim("generalized velocities", state.q.len(), state.qd.len())?;
        let h = m * &state.qd;
        let p = [h[0], h[1]];
        let (x, y) = (state.q[0], state.q[1]);
        Ok(Momentum {
            angular: h[2] + x * p[1] - y * p[0],
            linear: p,
        })
    }

    /// `½ q̇ᵀ M q̇`.
    pub fn kinetic_energy(&self, state: &State) -> Result<f64> {
        let m = self.mass_matrix(&state.q)?;
        check_dim("generalized velocities", state.q.len(), state.qd.len())?;
        Ok(0.5 * state.qd.dot(&(m * &state.qd)))
    }

    /// Centre-of-mass positions of base, links and payload (in that order).
    pub fn body_positions(&self, q: &DVector<f64>) -> Result<Vec<[f64; 2]>> {
        self.check_q(q.as_slice())?;
        Ok(self
            .body_terms(q.as_slice(), None)
            .into_iter()
            .map(|b| b.position)
            .collect())
    }

    pub fn center_of_mass(&self, q: &DVector<f64>) -> Result<[f64; 2]> {
        self.check_q(q.as_slice())?;
        let mut c = [0.0, 0.0];
        let mut total = 0.0;
        for b in self.body_terms(q.as_slice(), None) {
            c[0] += b.mass * b.position[0];
            c[1] += b.mass * b.position[1];
            total += b.mass;
        }
        Ok([c[0] / total, c[1] / total])
    }

    /// Rotational inertia of the frozen assembly about its centre of mass.
    pub fn assembly_inertia(&self, q: &DVector<f64>) -> Result<f64> {
        let com = self.center_of_mass(q)?;
        Ok(self
            .body_terms(q.as_slice(), None)
            .into_iter()
            .map(|b| {
                let dx = b.position[0] - com[0];
                let dy = b.position[1] - com[1];
                b.inertia + b.mass * (dx * dx + dy * dy)
            })
            .sum())
    }
}

impl Plant for MultibodyModel {
    fn dof(&self) -> usize {
        3 + self.links.len()
    }

    fn acceleration(&self, q: &[f64], qd: &[f64], u: &[f64]) -> DVector<f64> {
        let (m, c) = self.mass_and_bias(q, Some(qd));
        let rhs = DVector::from_column_slice(u) - c;
        match m.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => DVector::from_element(q.len(), f64::NAN),
        }
    }
}

/// Decoupled double integrator `m q̈ = u` in `dof` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMass {
    pub mass: f64,
    pub dof: usize,
}

impl PointMass {
    pub fn new(mass: f64, dof: usize) -> Result<Self> {
        if !(mass > 0.0) || dof == 0 {
            return Err(Error::Config("point mass needs mass > 0 and dof ≥ 1".into()));
        }
        Ok(Self { mass, dof })
    }
}

impl Plant for PointMass {
    fn dof(&self) -> usize {
        self.dof
    }

    fn acceleration(&self, _q: &[f64], _qd: &[f64], u: &[f64]) -> DVector<f64> {
        DVector::from_iterator(u.len(), u.iter().map(|f| f / self.mass))
    }
}

/// Per-knot Jacobians of the state derivative along a trajectory.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub times: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl Linearization {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Central-difference Jacobians `(∂f/∂x, ∂f/∂u)` of the state derivative.
///
/// Component `i` is perturbed by `1e-6·(1 + |zᵢ|)`.
pub fn jacobians<P: Plant + ?Sized>(
    plant: &P,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let nx = x.len();
    let nu = u.len();
    let mut a = DMatrix::zeros(nx, nx);
    let mut b = DMatrix::zeros(nx, nu);
    let mut xp = x.clone();
    for i in 0..nx {
        let h = 1e-6 * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        let fp = plant.state_derivative(&xp, u);
        xp[i] = x[i] - h;
        let fm = plant.state_derivative(&xp, u);
        xp[i] = x[i];
        a.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    let mut up = u.clone();
    for i in 0..nu {
        let h = 1e-6 * (1.0 + u[i].abs());
        up[i] = u[i] + h;
        let fp = plant.state_derivative(x, &up);
        up[i] = u[i] - h;
        let fm = plant.state_derivative(x, &up);
        up[i] = u[i];
        b.set_column(i, &((fp - fm) / (2.0 * h)));
    }
    (a, b)
}

/// Time-varying linearization `(A_k, B_k)` at every knot of `traj`.
///
/// The final knot, which carries no control, is linearized at `u = 0`.
pub fn linearize<P: Plant + ?Sized>(plant: &P, traj: &Trajectory) -> Result<Linearization> {
    check_dim("trajectory state", plant.state_dim(), traj.state_dim())?;
    check_dim("trajectory input", plant.input_dim(), traj.input_dim())?;
    let mut a = Vec::with_capacity(traj.len());
    let mut b = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let (ak, bk) = jacobians(plant, &traj.states[k], &traj.control(k));
        a.push(ak);
        b.push(bk);
    }
    Ok(Linearization {
        times: traj.times(),
        a,
        b,
    })
}
