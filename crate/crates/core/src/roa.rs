//! Sampled funnel estimation.
//!
//! Initial states are drawn uniformly from the current inlet ellipsoid and
//! simulated in closed loop. A rollout that violates a constraint, or whose
//! cost-to-go exceeds the current threshold at knot `k`, shrinks every
//! threshold before `k` to the cost-to-go it recorded there. The outlet
//! threshold `ρ_f = x̄_maxᵀ S_N x̄_max` never changes.
//!
//! While the inlet threshold is still infinite, samples come from the
//! bootstrap ellipsoid `{x̄ᵀ S_0 x̄ ≤ β ρ_f}`.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Plant;
use crate::error::{Error, Result};
use crate::funnel::Funnel;
use crate::linalg::{quad_form, solve_care};
use crate::sim::{nominal_fuel, rk4_step, rollout, FuelBudget, RolloutConfig, RolloutResult, Termination};
use crate::tvlqr::TvlqrPolicy;

/// Default bootstrap factor β.
pub const DEFAULT_BOOTSTRAP: f64 = 1000.0;

/// Random streams derived from one seed.
pub mod stream {
    pub const ESTIMATE: u64 = 1;
    pub const VERIFY: u64 = 2;
    pub const OUTLET_CHECK: u64 = 3;
}

/// Counter-based generator for one pipeline stage.
pub fn stage_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform sample from the closed unit ball in `dim` dimensions.
pub fn sample_unit_ball<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    assert!(dim >= 1, "unit ball needs dim ≥ 1");
    loop {
        let g = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = g.norm();
        if norm > 0.0 && norm.is_finite() {
            let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
            return g * (r / norm);
        }
    }
}

/// Uniform sampler on `{x | (x − c)ᵀ S (x − c) ≤ ρ}`.
#[derive(Debug, Clone)]
pub struct EllipsoidSampler {
    center: DVector<f64>,
    s: nalgebra::DMatrix<f64>,
    rho: f64,
    /// `W Λ^{-1/2}` for `S = W Λ Wᵀ`; maps the unit ball onto `{x̄ᵀ S x̄ ≤ 1}`.
    map: nalgebra::DMatrix<f64>,
}

impl EllipsoidSampler {
    pub fn new(center: DVector<f64>, s: nalgebra::DMatrix<f64>, rho: f64) -> Result<Self> {
        let n = center.len();
        if s.shape() != (n, n) {
            return Err(Error::Config(format!("shape matrix must be {n}×{n}")));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Config(format!(
                "sampling threshold must be finite and positive, got {rho}"
            )));
        }
        let eig = s.clone().symmetric_eigen();
        let max = eig.eigenvalues.amax();
        if eig.eigenvalues.iter().any(|l| !(*l > 1e-14 * max)) {
            return Err(Error::Config("shape matrix must be positive definite".into()));
        }
        let mut map = eig.eigenvectors.clone();
        for (j, lam) in eig.eigenvalues.iter().enumerate() {
            map.column_mut(j).scale_mut(1.0 / lam.sqrt());
        }
        Ok(Self { center, s, rho, map })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Same ellipsoid shape with a different threshold.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Config(format!("sampling threshold must be finite and positive, got {rho}")));
        }
        Ok(Self { rho, ..self.clone() })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let y = sample_unit_ball(self.center.len(), rng);
        let mut xbar = &self.map * y * self.rho.sqrt();
        let level = quad_form(&self.s, &xbar);
        if level > self.rho {
            // rounding pushed the point just outside
            xbar *= (self.rho / level).sqrt() * (1.0 - 1e-15);
        }
        &self.center + xbar
    }
}

/// `ρ_f = x̄_maxᵀ S_N x̄_max`.
pub fn rho_final(policy: &TvlqrPolicy, x_max: &[f64]) -> Result<f64> {
    if x_max.len() != policy.state_dim() {
        return Err(Error::Dimension {
            context: "x̄_max",
            expected: policy.state_dim(),
            actual: x_max.len(),
        });
    }
    Ok(quad_form(&policy.s[policy.knots() - 1], &DVector::from_column_slice(x_max)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub n_sims: usize,
    /// Tolerated deviation from the final state, per state component.
    pub x_max: Vec<f64>,
    /// Fuel multiplier; `inf` disables the fuel limit.
    pub alpha: f64,
    pub seed: u64,
    /// Bootstrap factor β.
    pub bootstrap: f64,
    /// Rollouts per parallel batch; `None` runs sequentially.
    pub parallel_batch: Option<usize>,
    /// Run the outlet-in-basin check before estimating.
    pub check_outlet: bool,
    pub rollout: RolloutConfig,
}

impl EstimationConfig {
    pub fn new(n_sims: usize, x_max: Vec<f64>, seed: u64) -> Self {
        Self {
            n_sims,
            x_max,
            alpha: f64::INFINITY,
            seed,
            bootstrap: DEFAULT_BOOTSTRAP,
            parallel_batch: None,
            check_outlet: true,
            rollout: RolloutConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bootstrap > 0.0) || !self.bootstrap.is_finite() {
            return Err(Error::Config(format!("bootstrap factor must be positive, got {}", self.bootstrap)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("fuel multiplier must be ≥ 0 or inf, got {}", self.alpha)));
        }
        if self.parallel_batch == Some(0) {
            return Err(Error::Config("parallel batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One line of the estimation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub j: usize,
    pub x0: Vec<f64>,
    pub termination: Termination,
    pub breach_knot: Option<usize>,
    /// `(κ, new ρ_κ)` for every threshold this simulation lowered.
    pub rho_updates: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct Estimate {
    pub funnel: Funnel,
    pub rho_final: f64,
    pub log: Vec<SimRecord>,
}

impl Estimate {
    /// JSON-lines log, one record per simulation.
    pub fn write_log<W: Write>(&self, mut writer: W) -> Result<()> {
        for rec in &self.log {
            serde_json::to_writer(&mut writer, rec)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }

    /// `knot,rho` CSV.
    pub fn write_rho_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["knot", "t", "rho"])?;
        for (k, r) in self.funnel.rho.iter().enumerate() {
            w.write_record([k.to_string(), format!("{:?}", self.funnel.knot_times[k]), format!("{r:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rollout_config(policy: &TvlqrPolicy, config: &EstimationConfig) -> Result<RolloutConfig> {
    let mut rc = config.rollout.clone();
    if config.alpha.is_finite() {
        rc.fuel = Some(FuelBudget::new(nominal_fuel(&policy.trajectory), config.alpha)?);
    }
    Ok(rc)
}

/// Knot at which a rollout's costs `j` first fail against `rho` (checked
/// from knot 1), or the knot of a constraint violation, whichever is first.
fn failure_knot(res: &RolloutResult, rho: &[f64]) -> Option<usize> {
    let exceed = (1..res.cost_to_go.len()).find(|&k| res.cost_to_go[k] > rho[k]);
    let violation = res
        .termination
        .is_violation()
        .then(|| res.termination.breach_knot())
        .flatten();
    match (exceed, violation) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, b) => a.or(b),
    }
}

/// Shrink `ρ_κ ← min(ρ_κ, J*_κ)` for `κ < k`; returns the updates made.
fn shrink(rho: &mut [f64], costs: &[f64], k: usize) -> Vec<(usize, f64)> {
    let last = rho.len() - 1;
    let mut updates = Vec::new();
    for kappa in 0..k.min(last) {
        if costs[kappa] < rho[kappa] {
            rho[kappa] = costs[kappa];
            updates.push((kappa, costs[kappa]));
        }
    }
    updates
}

fn check_inputs<P: Plant + ?Sized>(plant: &P, policy: &TvlqrPolicy, config: &EstimationConfig) -> Result<f64> {
    config.validate()?;
    if plant.state_dim() != policy.state_dim() || plant.input_dim() != policy.input_dim() {
        return Err(Error::Input("plant and policy dimensions differ".into()));
    }
    let rho_f = rho_final(policy, &config.x_max)?;
    if !(rho_f > 0.0) {
        return Err(Error::Config(format!(
            "outlet threshold ρ_f = {rho_f} must be positive; check x̄_max"
        )));
    }
    Ok(rho_f)
}

/// Sampled funnel estimation.
pub fn estimate_funnel<P: Plant + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    config: &EstimationConfig,
    trajectory_id: &str,
) -> Result<Estimate> {
    let rho_f = check_inputs(plant, policy, config)?;
    if config.check_outlet {
        let check = check_outlet_in_basin(plant, policy, rho_f, config.rollout.dt, 100, config.seed)?;
        if !check.passed() {
            return Err(Error::Estimation(format!(
                "outlet ellipsoid (ρ_f = {rho_f:e}) is not inside the terminal LQR basin: {} of {} boundary states failed; reduce x̄_max",
                check.failures, check.samples
            )));
        }
    }
    let rc = rollout_config(policy, config)?;
    let last = policy.knots() - 1;
    let mut rho = vec![f64::INFINITY; last + 1];
    rho[last] = rho_f;
    let base = EllipsoidSampler::new(policy.trajectory.states[0].clone(), policy.s[0].clone(), 1.0)?;
    let mut rng = stage_rng(config.seed, stream::ESTIMATE);
    let mut log = Vec::with_capacity(config.n_sims);

    let sampler_for = |rho0: f64| {
        let r = if rho0.is_finite() { rho0 } else { config.bootstrap * rho_f };
        base.with_rho(r)
    };

    match config.parallel_batch {
        None => {
            for j in 1..=config.n_sims {
                let x0 = sampler_for(rho[0])?.sample(&mut rng);
                let res = rollout(plant, policy, &x0, &rc, Some(&rho))?;
                let updates = match failure_knot(&res, &rho) {
                    Some(k) => shrink(&mut rho, &res.cost_to_go, k),
                    None => Vec::new(),
                };
                log.push(SimRecord {
                    j,
                    x0: x0.as_slice().to_vec(),
                    termination: res.termination,
                    breach_knot: res.termination.breach_knot(),
                    rho_updates: updates,
                });
            }
        }
        Some(batch) => {
            let mut j = 0;
            while j < config.n_sims {
                let b = batch.min(config.n_sims - j);
                let sampler = sampler_for(rho[0])?;
                let candidates: Vec<DVector<f64>> = (0..b).map(|_| sampler.sample(&mut rng)).collect();
                let (new_rho, records) = merge_batch(plant, policy, &rc, &rho, &candidates, j)?;
                rho = new_rho;
                log.extend(records);
                j += b;
            }
        }
    }
    if config.n_sims > 0 && rho[0].is_infinite() {
        return Err(Error::Estimation(format!(
            "inlet threshold still infinite after {} simulations: no sample from the bootstrap region (β = {}) failed; increase the bootstrap factor",
            config.n_sims, config.bootstrap
        )));
    }
    Ok(Estimate {
        funnel: Funnel::from_policy(policy, rho, trajectory_id)?,
        rho_final: rho_f,
        log,
    })
}

/// Roll out a batch concurrently against the frozen thresholds `snapshot`
/// and merge the shrinks.
///
/// Rollouts stop early only on constraint violations. The merge repeats
/// until no candidate fails against the merged thresholds without having
/// been applied; a failing candidate shrinks every knot before its first
/// failure against the snapshot (or before the outlet, if it passed the
/// snapshot). This never yields larger thresholds than processing the same
/// candidates one by one.
fn merge_batch<P: Plant + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    rc: &RolloutConfig,
    snapshot: &[f64],
    candidates: &[DVector<f64>],
    offset: usize,
) -> Result<(Vec<f64>, Vec<SimRecord>)> {
    let results: Vec<RolloutResult> = candidates
        .par_iter()
        .map(|x0| rollout(plant, policy, x0, rc, None))
        .collect::<Result<_>>()?;
    let last = snapshot.len() - 1;
    let reach: Vec<usize> = results
        .iter()
        .map(|r| failure_knot(r, snapshot).unwrap_or(last))
        .collect();
    let mut rho = snapshot.to_vec();
    let mut applied = vec![false; candidates.len()];
    let mut updates: Vec<Vec<(usize, f64)>> = vec![Vec::new(); candidates.len()];
    loop {
        let mut changed = false;
        for (c, res) in results.iter().enumerate() {
            if applied[c] || failure_knot(res, &rho).is_none() {
                continue;
            }
            applied[c] = true;
            let u = shrink(&mut rho, &res.cost_to_go, reach[c]);
            changed |= !u.is_empty();
            updates[c] = u;
        }
        if !changed {
            break;
        }
    }
    let records = candidates
        .iter()
        .zip(&results)
        .zip(updates)
        .enumerate()
        .map(|(i, ((x0, res), u))| {
            let termination = match (res.termination, failure_knot(res, &rho)) {
                (Termination::Completed, Some(k)) => Termination::CostExceeded(k),
                (t, _) => t,
            };
            SimRecord {
                j: offset + i + 1,
                x0: x0.as_slice().to_vec(),
                termination,
                breach_knot: termination.breach_knot(),
                rho_updates: u,
            }
        })
        .collect();
    Ok((rho, records))
}

/// Apply the shrinking rule to a fixed list of initial states, starting from
/// `ρ = ∞` except the outlet. Sequential mode processes them in order;
/// parallel mode uses one batch. Used to compare the two modes on the same
/// candidates.
pub fn replay_candidates<P: Plant + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    config: &EstimationConfig,
    candidates: &[DVector<f64>],
    parallel: bool,
) -> Result<Vec<f64>> {
    let rho_f = check_inputs(plant, policy, config)?;
    let rc = rollout_config(policy, config)?;
    let last = policy.knots() - 1;
    let mut rho = vec![f64::INFINITY; last + 1];
    rho[last] = rho_f;
    if parallel {
        return Ok(merge_batch(plant, policy, &rc, &rho, candidates, 0)?.0);
    }
    for x0 in candidates {
        let res = rollout(plant, policy, x0, &rc, Some(&rho))?;
        if let Some(k) = failure_knot(&res, &rho) {
            shrink(&mut rho, &res.cost_to_go, k);
        }
    }
    Ok(rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub x0: DVector<f64>,
    pub success: bool,
    pub final_cost: f64,
    pub termination: Termination,
    pub final_state: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub trials: Vec<Trial>,
    pub rho_final: f64,
}

impl VerifyReport {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    /// Success fraction; `None` without trials.
    pub fn fraction(&self) -> Option<f64> {
        (!self.trials.is_empty()).then(|| self.successes() as f64 / self.trials.len() as f64)
    }

    /// 95 % Wilson score interval for the success probability.
    pub fn wilson_interval(&self) -> Option<(f64, f64)> {
        wilson_interval(self.successes(), self.trials.len(), 1.959_963_984_540_054)
    }

    /// Per-trial CSV: `trial, success, class, final_cost, termination, x0…`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let nx = self.trials.first().map_or(0, |t| t.x0.len());
        let mut header: Vec<String> = ["trial", "success", "class", "final_cost", "termination"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..nx).map(|i| format!("x0_{i}")));
        w.write_record(&header)?;
        for (i, t) in self.trials.iter().enumerate() {
            let mut row = vec![
                i.to_string(),
                t.success.to_string(),
                if t.success { "green" } else { "red" }.to_string(),
                format!("{:?}", t.final_cost),
                format!("{:?}", t.termination),
            ];
            row.extend(t.x0.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let mid = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Some(((mid - half).max(0.0), (mid + half).min(1.0)))
}

/// Sample `n_check` states from the funnel inlet and report which reach the
/// outlet (`J*(t_f) < ρ_f`) without a constraint violation.
pub fn verify_funnel<P: Plant + ?Sized, R: Rng + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    funnel: &Funnel,
    n_check: usize,
    rollout_config: &RolloutConfig,
    rng: &mut R,
) -> Result<VerifyReport> {
    if funnel.knots() != policy.knots() || funnel.state_dim() != policy.state_dim() {
        return Err(Error::Input("funnel does not match the policy".into()));
    }
    let rho_f = funnel.outlet_rho();
    if n_check == 0 {
        return Ok(VerifyReport {
            trials: Vec::new(),
            rho_final: rho_f,
        });
    }
    if !funnel.inlet_rho().is_finite() {
        return Err(Error::Input("funnel inlet is unbounded (ρ_0 = inf); estimate it first".into()));
    }
    let sampler = EllipsoidSampler::new(funnel.centers[0].clone(), funnel.s[0].clone(), funnel.inlet_rho())?;
    let x0s: Vec<DVector<f64>> = (0..n_check).map(|_| sampler.sample(rng)).collect();
    let trials = x0s
        .into_iter()
        .map(|x0| {
            let res = rollout(plant, policy, &x0, rollout_config, None)?;
            let final_cost = res.final_cost();
            let success = res.completed() && final_cost < rho_f;
            Ok(Trial {
                x0,
                success,
                final_cost,
                termination: res.termination,
                final_state: res.states.last().cloned().unwrap_or_default(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VerifyReport {
        trials,
        rho_final: rho_f,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutletCheck {
    pub samples: usize,
    pub failures: usize,
}

impl OutletCheck {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Check that the outlet `{x̄ᵀ S_N x̄ ≤ ρ_f}` lies in the basin of the
/// infinite-horizon LQR about the final state.
///
/// `samples` states on the outlet boundary are simulated for 10 s under the
/// unconstrained law `u = u_N − K_∞ x̄` with RK4 steps of at most `dt`. A
/// state passes if `x̄ᵀ S_∞ x̄` never increases between 0.1 s checkpoints and
/// ends lower.
pub fn check_outlet_in_basin<P: Plant + ?Sized>(
    plant: &P,
    policy: &TvlqrPolicy,
    rho_f: f64,
    dt: f64,
    samples: usize,
    seed: u64,
) -> Result<OutletCheck> {
    const HORIZON: f64 = 10.0;
    const CHECKPOINT: f64 = 0.1;
    let last = policy.knots() - 1;
    let x_goal = policy.trajectory.states[last].clone();
    let u_goal = policy.trajectory.control(last);
    let (a, b) = crate::dynamics::jacobians(plant, &x_goal, &u_goal);
    let care = solve_care(&a, &b, &policy.q, &policy.r)?;
    let sampler = EllipsoidSampler::new(x_goal.clone(), policy.s[last].clone(), rho_f)?;
    let mut rng = stage_rng(seed, stream::OUTLET_CHECK);
    let per_checkpoint = RolloutConfig {
        dt,
        ..Default::default()
    }
    .substeps(CHECKPOINT);
    let h = CHECKPOINT / per_checkpoint as f64;
    let checkpoints = (HORIZON / CHECKPOINT).round() as usize;
    let mut failures = 0;
    for _ in 0..samples {
        // push the sample radially onto the boundary
        let x = sampler.sample(&mut rng);
        let xbar = &x - &x_goal;
        let level = quad_form(&policy.s[last], &xbar);
        if !(level > 0.0) {
            continue;
        }
        let mut x = &x_goal + xbar * (rho_f / level).sqrt();
        let v = |x: &DVector<f64>| quad_form(&care.s, &(x - &x_goal));
        let v0 = v(&x);
        let mut prev = v0;
        let mut ok = true;
        let control = |_t: f64, x: &DVector<f64>| &u_goal - &care.k * (x - &x_goal);
        'sim: for c in 0..checkpoints {
            for i in 0..per_checkpoint {
                let t = c as f64 * CHECKPOINT + i as f64 * h;
                x = rk4_step(plant, t, &x, h, control);
            }
            let vc = v(&x);
            if !vc.is_finite() || vc > prev * (1.0 + 1e-9) + 1e-300 {
                ok = false;
                break 'sim;
            }
            prev = vc;
        }
        if !(ok && prev < v0) {
            failures += 1;
        }
    }
    Ok(OutletCheck { samples, failures })
}
