//! `funnelkit` command line: optimize → synthesize → estimate → verify → plot.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical or
//! solver failure.

mod config;
mod manifest;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use funnelkit::funnel::{rho_plot, slice_plot, Funnel, SvgPlot};
use funnelkit::linalg::{asymmetry, min_eigenvalue};
use funnelkit::roa::{estimate_funnel, stage_rng, stream, verify_funnel};
use funnelkit::scenarios::Scenario;
use funnelkit::sim::rollout;
use funnelkit::trajectory::Trajectory;
use funnelkit::tvlqr::TvlqrPolicy;

use config::RunConfig;
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "funnelkit", version, about = "Trajectory optimization, TVLQR and sampled funnel estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in scenario (overrides the config file).
    #[arg(long)]
    scenario: Option<String>,
    /// Root seed for every random stage.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TerminalWeight {
    /// Infinite-horizon LQR solution at the final knot.
    Care,
    /// `lqr.qf_diag` from the config (falls back to `care`).
    Config,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the trajectory optimization problem and write the trajectory CSV.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the TVLQR policy along a trajectory.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long, value_enum, default_value = "config")]
        qf: TerminalWeight,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the funnel of a policy by sampled rollouts.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        /// Fuel multiplier; `inf` disables the fuel limit.
        #[arg(long)]
        alpha: Option<f64>,
        /// Number of simulations.
        #[arg(long)]
        sims: Option<usize>,
        /// Run rollouts in concurrent batches of this size.
        #[arg(long, num_args = 0..=1, default_missing_value = "64")]
        parallel: Option<usize>,
        /// Funnel JSON; the log and ρ CSV are written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a funnel by rolling out fresh samples from its inlet.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        funnel: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_check: usize,
        /// Enable the actuator deadband.
        #[arg(long)]
        deadband: bool,
        /// Per-trial CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write SVG plots.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Funnel to slice.
        #[arg(long)]
        funnel: Option<PathBuf>,
        /// State axes of the slice, e.g. `0,1`.
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        axes: Vec<usize>,
        /// Funnels whose ρ traces go in one ρ-vs-knot plot.
        #[arg(long)]
        rho: Vec<PathBuf>,
        /// Policy for a grid-offset rollout overlay.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Numerical or solver failure, reported with exit code 2.
#[derive(Debug)]
struct Numerical(anyhow::Error);

impl std::fmt::Display for Numerical {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Numerical {}

/// Marks toolkit failures of the numerical kind so they exit with 2.
fn classify(e: funnelkit::Error) -> anyhow::Error {
    if e.is_numerical() {
        anyhow!(Numerical(e.into()))
    } else {
        e.into()
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<Numerical>()) {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn resolve(common: &Common) -> Result<(RunConfig, Scenario)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = &common.scenario {
        cfg.scenario = Some(s.clone());
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    let sc = cfg.scenario()?;
    Ok((cfg, sc))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("cannot open {}", path.display()))?))
}

fn read_trajectory(path: &Path) -> Result<Trajectory> {
    Trajectory::read_csv(open(path)?).with_context(|| format!("cannot read trajectory {}", path.display()))
}

fn read_policy(path: &Path) -> Result<TvlqrPolicy> {
    TvlqrPolicy::read_json(open(path)?).with_context(|| format!("cannot read policy {}", path.display()))
}

fn read_funnel(path: &Path) -> Result<Funnel> {
    Funnel::read_json(open(path)?).with_context(|| format!("cannot read funnel {}", path.display()))
}

/// `dir/stem.suffix` for a sibling of `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Optimize { common, out } => cmd_optimize(&common, &out),
        Command::Synthesize {
            common,
            trajectory,
            qf,
            out,
        } => cmd_synthesize(&common, &trajectory, qf, &out),
        Command::Estimate {
            common,
            policy,
            alpha,
            sims,
            parallel,
            out,
        } => cmd_estimate(&common, &policy, alpha, sims, parallel, &out),
        Command::Verify {
            common,
            policy,
            funnel,
            n_check,
            deadband,
            out,
        } => cmd_verify(&common, &policy, &funnel, n_check, deadband, &out),
        Command::Plot {
            common,
            funnel,
            axes,
            rho,
            policy,
            out_dir,
        } => cmd_plot(&common, funnel.as_deref(), &axes, &rho, policy.as_deref(), &out_dir),
    }
}

fn cmd_optimize(common: &Common, out: &Path) -> Result<()> {
    let (cfg, sc) = resolve(common)?;
    let mut manifest = RunManifest::new("optimize", &cfg, cfg.seed)?;
    if let Some(path) = &common.config {
        manifest.input(path)?;
    }
    let report = manifest.time("optimize", || sc.optimize()).map_err(|e| {
        if let funnelkit::Error::SolverFailure { violation, .. } = &e {
            eprintln!("constraint violation report: max violation {violation:.3e} (tolerance 1e-6)");
        }
        classify(e)
    })?;
    let traj = &report.trajectory;
    traj.write_csv(create(out)?)?;
    manifest.output(out)?;
    let m = manifest.write_next_to(out)?;
    println!(
        "{}: {} knots, Δt = {:.4} s, T = {:.3} s, objective {:.4}, violation {:.2e}, {} outer / {} inner iterations",
        sc.name,
        traj.len(),
        traj.dt,
        traj.duration(),
        report.objective,
        report.violation,
        report.iterations,
        report.inner_iterations
    );
    println!("wrote {} and {}", out.display(), m.display());
    Ok(())
}

fn cmd_synthesize(common: &Common, trajectory: &Path, qf: TerminalWeight, out: &Path) -> Result<()> {
    let (cfg, mut sc) = resolve(common)?;
    if matches!(qf, TerminalWeight::Care) {
        sc.q_f = None;
    }
    let mut manifest = RunManifest::new("synthesize", &cfg, cfg.seed)?;
    let traj = read_trajectory(trajectory)?;
    manifest.input(trajectory)?;
    let policy = manifest.time("synthesize", || sc.synthesize(&traj)).map_err(classify)?;
    let min_eig = policy.s.iter().map(min_eigenvalue).fold(f64::INFINITY, f64::min);
    let max_asym = policy.s.iter().map(asymmetry).fold(0.0, f64::max);
    let terminal = (policy.s.last().unwrap() - &policy.q_f).amax();
    if min_eig < -1e-9 {
        return Err(anyhow!(Numerical(anyhow!("S lost positive semi-definiteness (λ_min = {min_eig:e})"))));
    }
    policy.write_json(create(out)?)?;
    manifest.output(out)?;
    manifest.write_next_to(out)?;
    println!(
        "{} knots; min λ(S_k) = {min_eig:.3e}, max asymmetry {max_asym:.1e}, |S_N − Q_f| = {terminal:.1e}",
        policy.knots()
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_estimate(
    common: &Common,
    policy_path: &Path,
    alpha: Option<f64>,
    sims: Option<usize>,
    parallel: Option<usize>,
    out: &Path,
) -> Result<()> {
    let (mut cfg, _) = resolve(common)?;
    if let Some(a) = alpha {
        cfg.estimation.alpha = Some(a);
    }
    if let Some(n) = sims {
        cfg.estimation.n_sims = Some(n);
    }
    if let Some(b) = parallel {
        cfg.estimation.parallel_batch = Some(b);
    }
    let sc = cfg.scenario()?;
    let mut manifest = RunManifest::new("estimate", &cfg, Some(sc.estimation.seed))?;
    let policy = read_policy(policy_path)?;
    manifest.input(policy_path)?;
    let id = policy_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let est = manifest
        .time("estimate", || estimate_funnel(&sc.model, &policy, &sc.estimation, &id))
        .map_err(classify)?;
    est.funnel.write_json(create(out)?)?;
    let log = sibling(out, "log.jsonl");
    est.write_log(create(&log)?)?;
    let rho_csv = sibling(out, "rho.csv");
    est.write_rho_csv(create(&rho_csv)?)?;
    for p in [out, log.as_path(), rho_csv.as_path()] {
        manifest.output(p)?;
    }
    manifest.write_next_to(out)?;

    let rho0 = est.funnel.inlet_rho();
    let det = est.funnel.s[0].determinant();
    let n = est.funnel.state_dim() as i32;
    // det(ρ₀ S₀⁻¹)^{1/2}
    let volume = (rho0.powi(n) / det).sqrt();
    let fuel_breaches = est
        .log
        .iter()
        .filter(|r| matches!(r.termination, funnelkit::sim::Termination::FuelExceeded(_)))
        .count();
    println!(
        "{} simulations (α = {}, seed {}): ρ_0 = {rho0:.4e}, ρ_f = {:.4e}, inlet volume proxy {volume:.4e}, {fuel_breaches} fuel breaches",
        est.log.len(),
        sc.estimation.alpha,
        sc.estimation.seed,
        est.rho_final
    );
    println!("wrote {}, {}, {}", out.display(), log.display(), rho_csv.display());
    Ok(())
}

fn cmd_verify(common: &Common, policy_path: &Path, funnel_path: &Path, n_check: usize, deadband: bool, out: &Path) -> Result<()> {
    let (cfg, sc) = resolve(common)?;
    let mut manifest = RunManifest::new("verify", &cfg, Some(sc.estimation.seed))?;
    let policy = read_policy(policy_path)?;
    let funnel = read_funnel(funnel_path)?;
    manifest.input(policy_path)?;
    manifest.input(funnel_path)?;
    let mut rng = stage_rng(sc.estimation.seed, stream::VERIFY);
    let rc = sc.rollout_config(deadband);
    let report = manifest
        .time("verify", || verify_funnel(&sc.model, &policy, &funnel, n_check, &rc, &mut rng))
        .map_err(classify)?;
    report.write_csv(create(out)?)?;
    manifest.output(out)?;
    manifest.write_next_to(out)?;
    match (report.fraction(), report.wilson_interval()) {
        (Some(f), Some((lo, hi))) => println!(
            "success {}/{} = {f:.3}, 95% Wilson interval [{lo:.3}, {hi:.3}] (deadband {})",
            report.successes(),
            report.trials.len(),
            if deadband { "on" } else { "off" }
        ),
        _ => println!("no trials requested"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn write_svg(plot: &SvgPlot, path: &Path) -> Result<()> {
    std::fs::write(path, plot.render()).with_context(|| format!("cannot write {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_plot(
    common: &Common,
    funnel: Option<&Path>,
    axes: &[usize],
    rho: &[PathBuf],
    policy: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let &[a0, a1] = axes else {
        bail!("--axes needs exactly two indices, got {axes:?}");
    };
    if funnel.is_none() && rho.is_empty() && policy.is_none() {
        bail!("nothing to plot: pass --funnel, --rho or --policy");
    }
    std::fs::create_dir_all(out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let funnel = funnel.map(read_funnel).transpose()?;

    if let Some(f) = &funnel {
        let skipped = f.rho.iter().filter(|r| r.is_infinite()).count();
        if skipped > 0 {
            eprintln!("notice: skipping {skipped} unshrunk knots (ρ = inf)");
        }
        match slice_plot(f, (a0, a1))? {
            Some(plot) => write_svg(&plot, &out_dir.join("slice.svg"))?,
            None => eprintln!("notice: funnel has no finite knots on axes ({a0}, {a1}); no slice plot written"),
        }
    }

    if !rho.is_empty() {
        let funnels = rho.iter().map(|p| read_funnel(p)).collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = rho
            .iter()
            .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let series: Vec<(&str, &[f64])> = names.iter().map(|n| n.as_str()).zip(funnels.iter().map(|f| f.rho.as_slice())).collect();
        write_svg(&rho_plot(&series), &out_dir.join("rho.svg"))?;
    }

    if let Some(path) = policy {
        let (_, sc) = resolve(common)?;
        let policy = read_policy(path)?;
        if sc.grid.is_empty() {
            eprintln!("notice: scenario {} has no grid offsets; no overlay written", sc.name);
            return Ok(());
        }
        let mut plot = SvgPlot::new(format!("{} grid-offset rollouts", sc.name));
        let rc = sc.rollout_config(false);
        for off in &sc.grid {
            let mut x0 = policy.trajectory.states[0].clone();
            x0[a0] += off[0];
            x0[a1] += off[1];
            let res = rollout(&sc.model, &policy, &x0, &rc, None).map_err(classify)?;
            let path = res.states.iter().map(|x| [x[a0], x[a1]]).collect();
            plot.line(path, "#1f77b4", false, false);
            plot.marker([x0[a0], x0[a1]], "#1f77b4");
        }
        let nominal = policy.trajectory.states.iter().map(|x| [x[a0], x[a1]]).collect();
        plot.line(nominal, "black", false, true);
        if let Some(f) = &funnel {
            if let Ok(e) = f.project(0, (a0, a1)) {
                plot.ellipse(&e, "#2ca02c", false);
            }
            if let Ok(e) = f.project(f.knots() - 1, (a0, a1)) {
                plot.ellipse(&e, "#d62728", true);
            }
        }
        write_svg(&plot, &out_dir.join("grid.svg"))?;
    }
    Ok(())
}
