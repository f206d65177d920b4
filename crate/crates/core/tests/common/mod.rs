//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use funnelkit::dynamics::{MultibodyModel, Plant};
use funnelkit::sim::rk4_step;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One body's mass, inertia, centre-of-mass position and orientation.
pub struct Pose {
    pub mass: f64,
    pub inertia: f64,
    pub p: [f64; 2],
    pub angle: f64,
}

fn rot(a: f64, v: [f64; 2]) -> [f64; 2] {
    [a.cos() * v[0] - a.sin() * v[1], a.sin() * v[0] + a.cos() * v[1]]
}

/// Forward kinematics written out body by body.
pub fn poses(model: &MultibodyModel, q: &[f64]) -> Vec<Pose> {
    let mut out = vec![Pose {
        mass: model.base_mass,
        inertia: model.base_inertia,
        p: [q[0], q[1]],
        angle: q[2],
    }];
    let m = rot(q[2], model.mount);
    let mut joint = [q[0] + m[0], q[1] + m[1]];
    let mut angle = q[2];
    for (i, link) in model.links.iter().enumerate() {
        angle += q[3 + i];
        let c = rot(angle, [link.com_offset, 0.0]);
        out.push(Pose {
            mass: link.mass,
            inertia: link.inertia,
            p: [joint[0] + c[0], joint[1] + c[1]],
            angle,
        });
        let t = rot(angle, [link.length, 0.0]);
        joint = [joint[0] + t[0], joint[1] + t[1]];
    }
    if let Some(pl) = &model.payload {
        let o = rot(angle, pl.offset);
        out.push(Pose {
            mass: pl.mass,
            inertia: pl.inertia,
            p: [joint[0] + o[0], joint[1] + o[1]],
            angle,
        });
    }
    out
}

/// Body velocities `(v, ω)` by central differences of the kinematics along `qd`.
pub fn velocities(model: &MultibodyModel, q: &[f64], qd: &[f64]) -> Vec<([f64; 2], f64)> {
    let h = 1e-5;
    let qp: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a + h * b).collect();
    let qm: Vec<f64> = q.iter().zip(qd).map(|(a, b)| a - h * b).collect();
    poses(model, &qp)
        .iter()
        .zip(poses(model, &qm))
        .map(|(p, m)| {
            (
                [(p.p[0] - m.p[0]) / (2.0 * h), (p.p[1] - m.p[1]) / (2.0 * h)],
                (p.angle - m.angle) / (2.0 * h),
            )
        })
        .collect()
}

/// `½ Σ m|v|² + ½ I ω²`.
pub fn kinetic_energy(model: &MultibodyModel, q: &[f64], qd: &[f64]) -> f64 {
    poses(model, q)
        .iter()
        .zip(velocities(model, q, qd))
        .map(|(b, (v, w))| 0.5 * b.mass * (v[0] * v[0] + v[1] * v[1]) + 0.5 * b.inertia * w * w)
        .sum()
}

/// Mass matrix by polarization of the kinetic energy.
pub fn mass_matrix(model: &MultibodyModel, q: &[f64]) -> DMatrix<f64> {
    let n = q.len();
    let e = |i: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    };
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = 2.0 * kinetic_energy(model, q, &e(i));
        for j in 0..i {
            let mut v = e(i);
            v[j] = 1.0;
            let kij = kinetic_energy(model, q, &v);
            let val = kij - 0.5 * m[(i, i)] - 0.5 * m[(j, j)];
            m[(i, j)] = val;
            m[(j, i)] = val;
        }
    }
    m
}

/// Coriolis/centrifugal vector from Lagrange's equations, using the oracle
/// mass matrix and finite differences in `q`.
pub fn bias_forces(model: &MultibodyModel, q: &[f64], qd: &[f64]) -> DVector<f64> {
    let n = q.len();
    let h = 1e-3;
    let dm = |k: usize| {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[k] += h;
        qm[k] -= h;
        (mass_matrix(model, &qp) - mass_matrix(model, &qm)) / (2.0 * h)
    };
    let qdv = DVector::from_column_slice(qd);
    let dms: Vec<DMatrix<f64>> = (0..n).map(dm).collect();
    let mut mdot = DMatrix::zeros(n, n);
    for k in 0..n {
        mdot += &dms[k] * qd[k];
    }
    let mut c = &mdot * &qdv;
    for i in 0..n {
        c[i] -= 0.5 * (qdv.transpose() * &dms[i] * &qdv)[(0, 0)];
    }
    c
}

/// `(L, P)` about the origin from the oracle kinematics.
pub fn momentum(model: &MultibodyModel, q: &[f64], qd: &[f64]) -> (f64, [f64; 2]) {
    let mut l = 0.0;
    let mut p = [0.0; 2];
    for (b, (v, w)) in poses(model, q).iter().zip(velocities(model, q, qd)) {
        l += b.mass * (b.p[0] * v[1] - b.p[1] * v[0]) + b.inertia * w;
        p[0] += b.mass * v[0];
        p[1] += b.mass * v[1];
    }
    (l, p)
}

/// Integrate `ẋ = f(x, u)` with constant `u` for `steps` RK4 steps.
pub fn integrate<P: Plant + ?Sized>(plant: &P, x0: &DVector<f64>, u: &DVector<f64>, h: f64, steps: usize) -> DVector<f64> {
    let mut x = x0.clone();
    for i in 0..steps {
        x = rk4_step(plant, i as f64 * h, &x, h, |_, _| u.clone());
    }
    x
}

/// Seeded generator for test inputs.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}
