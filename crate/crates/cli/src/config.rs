//! Run configuration: a built-in scenario plus optional overrides, read from
//! TOML. Every table and key is optional.

use std::path::Path;

use anyhow::{bail, Context, Result};
use funnelkit::dynamics::MultibodyModel;
use funnelkit::scenarios::{self, Scenario};
use funnelkit::trajopt::Bounds;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Base scenario, `freeflyer` or `detumble`.
    pub scenario: Option<String>,
    pub seed: Option<u64>,
    /// Replaces the scenario's model.
    pub model: Option<MultibodyModel>,
    /// Replaces the scenario's bounds.
    pub bounds: Option<Bounds>,
    #[serde(default)]
    pub trajopt: TrajoptSection,
    #[serde(default)]
    pub lqr: LqrSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub estimation: EstimationSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajoptSection {
    pub intervals: Option<usize>,
    pub dt_init: Option<f64>,
    pub time_weight: Option<f64>,
    pub effort_diag: Option<Vec<f64>>,
    pub terminal_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqrSection {
    pub q_diag: Option<Vec<f64>>,
    pub r_diag: Option<Vec<f64>>,
    /// Terminal weight; omitted means the infinite-horizon solution.
    pub qf_diag: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSection {
    pub dt: Option<f64>,
    pub saturate: Option<bool>,
    pub deadband: Option<Vec<f64>>,
    pub divergence_limit: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    pub n_sims: Option<usize>,
    pub x_max: Option<Vec<f64>>,
    /// Fuel multiplier; TOML `inf` disables the fuel limit.
    pub alpha: Option<f64>,
    pub bootstrap: Option<f64>,
    pub parallel_batch: Option<usize>,
    pub check_outlet: Option<bool>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // toml reports line and column in its error message
        toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    /// The base scenario with every override applied.
    pub fn scenario(&self) -> Result<Scenario> {
        let name = self.scenario.as_deref().unwrap_or("freeflyer");
        let mut sc = scenarios::by_name(name)?;
        if let Some(m) = &self.model {
            sc.model = m.clone();
        }
        if let Some(b) = &self.bounds {
            sc.bounds = b.clone();
        }
        let nx = 2 * funnelkit::dynamics::Plant::dof(&sc.model);
        let nu = funnelkit::dynamics::Plant::input_dim(&sc.model);

        let t = &self.trajopt;
        if let Some(n) = t.intervals {
            sc.intervals = n;
        }
        if let Some(dt) = t.dt_init {
            sc.dt_init = dt;
        }
        if let Some(w) = t.time_weight {
            sc.weights.time = w;
        }
        if let Some(d) = &t.effort_diag {
            sc.weights.effort = diag("trajopt.effort_diag", d, nu)?;
        }
        if let Some(d) = &t.terminal_diag {
            sc.weights.terminal = diag("trajopt.terminal_diag", d, nx)?;
        }

        if let Some(d) = &self.lqr.q_diag {
            sc.q = diag("lqr.q_diag", d, nx)?;
        }
        if let Some(d) = &self.lqr.r_diag {
            sc.r = diag("lqr.r_diag", d, nu)?;
        }
        if let Some(d) = &self.lqr.qf_diag {
            sc.q_f = Some(diag("lqr.qf_diag", d, nx)?);
        }

        let r = &self.rollout;
        if let Some(dt) = r.dt {
            sc.rollout.dt = dt;
        }
        if r.saturate == Some(false) {
            sc.rollout.saturation = None;
        } else if self.bounds.is_some() || r.saturate == Some(true) {
            sc.rollout.saturation = Some((sc.bounds.u_min.clone(), sc.bounds.u_max.clone()));
        }
        if let Some(db) = &r.deadband {
            if db.len() != nu {
                bail!("rollout.deadband needs {nu} entries, got {}", db.len());
            }
            sc.deadband = db.clone();
        }
        if let Some(l) = r.divergence_limit {
            sc.rollout.divergence_limit = l;
        }
        sc.estimation.rollout = sc.rollout.clone();

        let e = &self.estimation;
        if let Some(n) = e.n_sims {
            sc.estimation.n_sims = n;
        }
        if let Some(x) = &e.x_max {
            if x.len() != nx {
                bail!("estimation.x_max needs {nx} entries, got {}", x.len());
            }
            sc.estimation.x_max = x.clone();
        }
        if let Some(a) = e.alpha {
            sc.estimation.alpha = a;
        }
        if let Some(b) = e.bootstrap {
            sc.estimation.bootstrap = b;
        }
        if let Some(b) = e.parallel_batch {
            sc.estimation.parallel_batch = Some(b);
        }
        if let Some(c) = e.check_outlet {
            sc.estimation.check_outlet = c;
        }
        if let Some(seed) = self.seed {
            sc.estimation.seed = seed;
        }
        Ok(sc)
    }
}

fn diag(key: &str, values: &[f64], n: usize) -> Result<DMatrix<f64>> {
    if values.len() != n {
        bail!("{key} needs {n} entries, got {}", values.len());
    }
    Ok(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
}
