//! Augmented-Lagrangian solver for equality-constrained programs with
//! simple bounds.
//!
//! ```text
//! min f(z)  s.t.  c(z) = 0,  lo ≤ z ≤ hi
//! ```
//!
//! Each outer iteration minimises `f + λᵀc + ½μ‖c‖²` over the box. Problems
//! that can solve with a Gauss–Newton model of that function (`∇²f ≈ H_f`,
//! `μ JᵀJ`) get projected Newton steps; others fall back to projected
//! limited-memory BFGS. Outer iterates whose infeasibility
//! would increase are rejected (the penalty is raised and the inner solve
//! restarts from the last accepted point), so the accepted sequence has a
//! non-increasing `‖c‖_∞`.

use std::collections::VecDeque;

use crate::error::{Error, Result};

/// A smooth nonlinear program with equality constraints and box bounds.
pub trait NlpProblem {
    /// Whatever is needed to apply `Jᵀ` at a point.
    type Jacobian;

    fn num_vars(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn lower_bounds(&self) -> &[f64];
    fn upper_bounds(&self) -> &[f64];

    /// Objective value; the gradient is written to `grad` when given.
    fn objective(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64;

    fn constraints(&self, z: &[f64], c: &mut [f64]);

    fn jacobian(&self, z: &[f64]) -> Self::Jacobian;

    /// `out += J(z)ᵀ v`.
    fn jacobian_transpose_mul(&self, jac: &Self::Jacobian, v: &[f64], out: &mut [f64]);

    /// Whether [`NlpProblem::newton_direction`] is implemented.
    fn supports_newton(&self) -> bool {
        false
    }

    /// Solve `(H + μ JᵀJ + δI) d = −g` restricted to the `free` variables
    /// (`d = 0` elsewhere), where `H` models the Hessian of `f + λᵀc`.
    /// `None` when unsupported or not positive definite.
    #[allow(clippy::too_many_arguments)]
    fn newton_direction(
        &self,
        _z: &[f64],
        _jac: &Self::Jacobian,
        _lambda: &[f64],
        _mu: f64,
        _grad: &[f64],
        _free: &[bool],
        _damping: f64,
    ) -> Option<Vec<f64>> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct AlOptions {
    /// Target `‖c‖_∞`.
    pub feasibility_tol: f64,
    /// Target projected-gradient norm of the Lagrangian.
    pub stationarity_tol: f64,
    pub initial_penalty: f64,
    pub max_penalty: f64,
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    pub memory: usize,
}

impl Default for AlOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-7,
            stationarity_tol: 1e-5,
            initial_penalty: 10.0,
            max_penalty: 1e10,
            max_outer_iterations: 60,
            max_inner_iterations: 5000,
            memory: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlReport {
    pub z: Vec<f64>,
    pub multipliers: Vec<f64>,
    pub objective: f64,
    /// `‖c‖_∞` at the returned point.
    pub violation: f64,
    /// `‖P(z − ∇L) − z‖_∞` at the returned point.
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub penalty: f64,
    /// `‖c‖_∞` of each accepted outer iterate.
    pub infeasibility_history: Vec<f64>,
}

fn project(z: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lo[i], hi[i]);
    }
}

/// `‖P(z − g) − z‖_∞`
pub fn projected_gradient_norm(z: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((zi, gi), (l, h))| ((zi - gi).clamp(*l, *h) - zi).abs())
        .fold(0.0, f64::max)
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |a, x| a.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct BoxOptions {
    pub tol: f64,
    pub max_iterations: usize,
    pub memory: usize,
}

#[derive(Debug, Clone)]
pub struct BoxResult {
    pub z: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub projected_gradient: f64,
}

/// Projected L-BFGS for `min f(z)` over `lo ≤ z ≤ hi`.
///
/// Variables sitting on a bound with the gradient pushing outward are held
/// fixed for the quasi-Newton step; the step is then projected back onto
/// the box with an Armijo backtracking search along the projection arc.
pub fn minimize_box<F, G>(
    mut value: F,
    mut value_grad: G,
    z0: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &BoxOptions,
) -> BoxResult
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = z0.len();
    let mut z = z0.to_vec();
    project(&mut z, lo, hi);
    let mut g = vec![0.0; n];
    let mut f = value_grad(&z, &mut g);
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut pg = projected_gradient_norm(&z, &g, lo, hi);
    let mut stall = 0;

    while iterations < opts.max_iterations && pg > opts.tol {
        iterations += 1;
        let eps_bound = 1e-12;
        let free: Vec<bool> = (0..n)
            .map(|i| {
                let at_lo = z[i] <= lo[i] + eps_bound * (1.0 + lo[i].abs());
                let at_hi = z[i] >= hi[i] - eps_bound * (1.0 + hi[i].abs());
                !(lo[i] == hi[i] || (at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0))
            })
            .collect();

        // two-loop recursion on the free subspace
        let mut d: Vec<f64> = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * (0..n).filter(|&i| free[i]).map(|i| s[i] * d[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    d[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let sy = dot(s, y);
            let yy = dot(y, y);
            if yy > 0.0 {
                let gamma = sy / yy;
                d.iter_mut().for_each(|v| *v *= gamma);
            }
        } else {
            // first step: keep the initial move modest
            let gn = inf_norm(&d);
            if gn > 0.0 {
                let scale = (1.0 / gn).min(1.0);
                d.iter_mut().for_each(|v| *v *= scale);
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * (0..n).filter(|&i| free[i]).map(|i| y[i] * d[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    d[i] += s[i] * (a - b);
                }
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
            let gn = inf_norm(&d);
            if gn > 0.0 {
                let scale = (1.0 / gn).min(1.0);
                d.iter_mut().for_each(|v| *v *= scale);
            }
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                break;
            }
        }

        let mut step = 1.0;
        let mut trial = vec![0.0; n];
        let mut accepted = false;
        let mut f_trial = f;
        for _ in 0..50 {
            for i in 0..n {
                trial[i] = (z[i] + step * d[i]).clamp(lo[i], hi[i]);
            }
            f_trial = value(&trial);
            let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
            if f_trial.is_finite() && f_trial <= f + 1e-4 * decrease.min(0.0) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        }

        let mut g_new = vec![0.0; n];
        let f_new = value_grad(&trial, &mut g_new);
        debug_assert!((f_new - f_trial).abs() <= 1e-9 * (1.0 + f_new.abs()));
        let s: Vec<f64> = (0..n).map(|i| trial[i] - z[i]).collect();
        let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel_change = (f - f_new).abs() / f.abs().max(f_new.abs()).max(1.0);
        if rel_change < 1e-16 {
            stall += 1;
        } else {
            stall = 0;
        }
        z = trial;
        g = g_new;
        f = f_new;
        pg = projected_gradient_norm(&z, &g, lo, hi);
        if stall >= 10 {
            break;
        }
    }

    BoxResult {
        z,
        value: f,
        grad: g,
        iterations,
        projected_gradient: pg,
    }
}

struct Augmented<'a, P: NlpProblem> {
    problem: &'a P,
    lambda: &'a [f64],
    mu: f64,
}

impl<P: NlpProblem> Augmented<'_, P> {
    fn value(&self, z: &[f64]) -> f64 {
        let mut c = vec![0.0; self.problem.num_constraints()];
        self.problem.constraints(z, &mut c);
        let f = self.problem.objective(z, None);
        f + dot(self.lambda, &c) + 0.5 * self.mu * dot(&c, &c)
    }

    fn value_grad(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        self.value_grad_jac(z, grad).0
    }

    fn value_grad_jac(&self, z: &[f64], grad: &mut [f64]) -> (f64, P::Jacobian) {
        let mut c = vec![0.0; self.problem.num_constraints()];
        self.problem.constraints(z, &mut c);
        let f = self.problem.objective(z, Some(grad));
        let v: Vec<f64> = c
            .iter()
            .zip(self.lambda)
            .map(|(ci, li)| li + self.mu * ci)
            .collect();
        let jac = self.problem.jacobian(z);
        self.problem.jacobian_transpose_mul(&jac, &v, grad);
        (f + dot(self.lambda, &c) + 0.5 * self.mu * dot(&c, &c), jac)
    }

    /// Projected Newton (Bertsekas) on the augmented Lagrangian. Returns
    /// `None` if the problem supplies no Newton directions.
    fn minimize_newton(&self, z0: &[f64], lo: &[f64], hi: &[f64], tol: f64, max_iter: usize) -> Option<BoxResult> {
        if !self.problem.supports_newton() {
            return None;
        }
        let n = z0.len();
        let mut z = z0.to_vec();
        project(&mut z, lo, hi);
        let mut g = vec![0.0; n];
        let (mut f, mut jac) = self.value_grad_jac(&z, &mut g);
        let mut pg = projected_gradient_norm(&z, &g, lo, hi);
        let mut damping = 1e-10;
        let mut iterations = 0;
        let mut stall = 0;
        while iterations < max_iter && pg > tol {
            iterations += 1;
            let eps = pg.min(1e-6);
            let free: Vec<bool> = (0..n)
                .map(|i| {
                    let at_lo = z[i] <= lo[i] + eps;
                    let at_hi = z[i] >= hi[i] - eps;
                    !(lo[i] == hi[i] || (at_lo && g[i] > 0.0) || (at_hi && g[i] < 0.0))
                })
                .collect();
            let d = match self.problem.newton_direction(&z, &jac, self.lambda, self.mu, &g, &free, damping) {
                Some(d) if dot(&g, &d) < 0.0 => d,
                _ => {
                    damping = (damping * 100.0).max(1e-8);
                    if damping > 1e12 {
                        break;
                    }
                    continue;
                }
            };
            let mut step = 1.0;
            let mut trial = vec![0.0; n];
            let mut accepted = false;
            for _ in 0..40 {
                for i in 0..n {
                    trial[i] = (z[i] + step * d[i]).clamp(lo[i], hi[i]);
                }
                let ft = self.value(&trial);
                let decrease: f64 = (0..n).map(|i| g[i] * (trial[i] - z[i])).sum();
                if ft.is_finite() && ft <= f + 1e-4 * decrease.min(0.0) {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                damping = (damping * 100.0).max(1e-8);
                if damping > 1e12 {
                    break;
                }
                continue;
            }
            if step == 1.0 {
                damping = (damping / 10.0).max(1e-12);
            } else if step < 0.1 {
                damping *= 10.0;
            }
            let (f_new, jac_new) = self.value_grad_jac(&trial, &mut g);
            let rel = (f - f_new).abs() / f.abs().max(1.0);
            stall = if rel < 1e-15 { stall + 1 } else { 0 };
            z = trial;
            f = f_new;
            jac = jac_new;
            pg = projected_gradient_norm(&z, &g, lo, hi);
            if stall >= 5 {
                break;
            }
        }
        Some(BoxResult {
            z,
            value: f,
            grad: g,
            iterations,
            projected_gradient: pg,
        })
    }
}

/// Gradient of `f + λᵀc` and the constraint values at `z`.
fn lagrangian_gradient<P: NlpProblem>(problem: &P, z: &[f64], lambda: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut g = vec![0.0; problem.num_vars()];
    problem.objective(z, Some(&mut g));
    let jac = problem.jacobian(z);
    problem.jacobian_transpose_mul(&jac, lambda, &mut g);
    let mut c = vec![0.0; problem.num_constraints()];
    problem.constraints(z, &mut c);
    (g, c)
}

/// Solve `problem` from `z0` by the augmented-Lagrangian method.
pub fn solve_augmented_lagrangian<P: NlpProblem>(
    problem: &P,
    z0: &[f64],
    opts: &AlOptions,
) -> Result<AlReport> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    if z0.len() != n {
        return Err(Error::Dimension {
            context: "initial guess",
            expected: n,
            actual: z0.len(),
        });
    }
    let lo = problem.lower_bounds().to_vec();
    let hi = problem.upper_bounds().to_vec();
    if lo.iter().zip(&hi).any(|(l, h)| l > h) {
        return Err(Error::Config("lower bound exceeds upper bound".into()));
    }

    let mut z = z0.to_vec();
    project(&mut z, &lo, &hi);
    let mut lambda = vec![0.0; m];
    let mut mu = opts.initial_penalty;
    let mut c = vec![0.0; m];
    problem.constraints(&z, &mut c);
    let mut violation = inf_norm(&c);
    let mut history = vec![violation];
    let mut omega = 1e-2_f64.max(opts.stationarity_tol);
    let mut inner_total = 0;
    let mut outer = 0;
    let mut stationarity = f64::INFINITY;

    while outer < opts.max_outer_iterations {
        outer += 1;
        let aug = Augmented {
            problem,
            lambda: &lambda,
            mu,
        };
        let res = match aug.minimize_newton(&z, &lo, &hi, omega, opts.max_inner_iterations) {
            Some(r) => r,
            None => minimize_box(
                |x| aug.value(x),
                |x, g| aug.value_grad(x, g),
                &z,
                &lo,
                &hi,
                &BoxOptions {
                    tol: omega,
                    max_iterations: opts.max_inner_iterations,
                    memory: opts.memory,
                },
            ),
        };
        inner_total += res.iterations;
        let mut c_new = vec![0.0; m];
        problem.constraints(&res.z, &mut c_new);
        let viol_new = inf_norm(&c_new);

        if viol_new > violation && outer > 1 {
            // reject: keep the infeasibility sequence monotone
            if mu >= opts.max_penalty {
                break;
            }
            mu = (mu * 10.0).min(opts.max_penalty);
            continue;
        }
        let previous = violation;
        z = res.z;
        c = c_new;
        violation = viol_new;
        history.push(violation);
        // inner gradient = ∇f + Jᵀ(λ + μc)
        stationarity = res.projected_gradient;
        for i in 0..m {
            lambda[i] += mu * c[i];
        }
        if violation <= opts.feasibility_tol && stationarity <= opts.stationarity_tol {
            break;
        }
        if violation > 0.25 * previous && violation > opts.feasibility_tol {
            if mu >= opts.max_penalty {
                break;
            }
            mu = (mu * 10.0).min(opts.max_penalty);
        }
        omega = (omega * 0.1).max(opts.stationarity_tol);
    }

    let (g, c_final) = lagrangian_gradient(problem, &z, &lambda);
    let final_violation = inf_norm(&c_final);
    let final_stationarity = projected_gradient_norm(&z, &g, &lo, &hi).min(stationarity);
    let objective = problem.objective(&z, None);
    if final_violation > opts.feasibility_tol || final_stationarity > opts.stationarity_tol {
        return Err(Error::SolverFailure {
            iterations: outer,
            violation: final_violation,
            stationarity: final_stationarity,
            best: z,
        });
    }
    Ok(AlReport {
        z,
        multipliers: lambda,
        objective,
        violation: final_violation,
        stationarity: final_stationarity,
        outer_iterations: outer,
        inner_iterations: inner_total,
        penalty: mu,
        infeasibility_history: history,
    })
}
