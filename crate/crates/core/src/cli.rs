//! Experiment runner behind the `pmdlab` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::bounds::{default_beta_grid, default_horizon_grid, growth_integrals, reproduce_figure};
use crate::config::{BoundsConfig, Config, ConfigError, McPolicy};
use crate::domain::ControlProblem;
use crate::elliptic::solve_on_policy_bellman;
use crate::error::Error;
use crate::flow::{distinct_taus, Scheduler, error_decomposition, integrate_flow, FlowOptions, FlowTrajectory};
use crate::hjb::{default_tolerance, solve_regularized_hjb, solve_unregularized_hjb, DEFAULT_MAX_ITER};
use crate::io::{self, McCheckRow, RunManifest};
use crate::montecarlo::simulate_exit_value;
use crate::policy::{FeatureField, Policy};

pub const OUT_ENV: &str = "PMDLAB_OUT";
const DEFAULT_OUT: &str = "pmdlab-out";

#[derive(Debug, Parser)]
#[command(name = "pmdlab", version, about = "Policy mirror descent experiments for 1D exit-time control")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory (falls back to $PMDLAB_OUT, then ./pmdlab-out)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for stochastic components; overrides `seed` in the config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override a scalar config key, e.g. `--set grid.n_interior=99`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Regularized HJB solutions for each configured tau, plus tau = 0
    SolveHjb { config: PathBuf },
    /// Integrate the mirror-descent flow and decompose its error
    RunFlow { config: PathBuf },
    /// Tabulate the annealing bound over the configured beta and horizon grids
    SweepBounds { config: PathBuf },
    /// Compare PDE values with Monte Carlo estimates at probe points
    McCheck { config: PathBuf },
    /// sweep-bounds on the default grids
    ReproduceFigure { config: Option<PathBuf> },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::SolveHjb { .. } => "solve-hjb",
            Command::RunFlow { .. } => "run-flow",
            Command::SweepBounds { .. } => "sweep-bounds",
            Command::McCheck { .. } => "mc-check",
            Command::ReproduceFigure { .. } => "reproduce-figure",
        }
    }
}

/// Process outcome; the discriminant is the exit status.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Numerical(String),
    Check(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Check(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Numerical(m) | Failure::Check(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidGrid(_)
            | Error::InvalidActionSpace(_)
            | Error::InvalidProblem(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidTau(_)
            | Error::NotDiscrete
            | Error::PecletViolation { .. }
            | Error::TauMismatch { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(format!("i/o: {e}"))
    }
}

/// Parses `args` (including the program name), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(manifest) => {
            for p in &manifest.outputs {
                println!("{}", p.display());
            }
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

/// Output directory and the files written so far.
pub struct Run {
    pub out: PathBuf,
    pub outputs: Vec<PathBuf>,
}

impl Run {
    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.out.join(name);
        self.outputs.push(p.clone());
        p
    }
}

pub fn execute(cli: &Cli) -> Result<RunManifest, Failure> {
    let started = Instant::now();
    let mut cfg = match &cli.command {
        Command::SolveHjb { config } | Command::RunFlow { config } | Command::SweepBounds { config } | Command::McCheck { config } => {
            Config::from_path(config, &cli.common.overrides)?
        }
        Command::ReproduceFigure { config: Some(config) } => Config::from_path(config, &cli.common.overrides)?,
        Command::ReproduceFigure { config: None } => Config::from_str_with("", &cli.common.overrides)?,
    };
    let seed = cli.common.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    if let Command::ReproduceFigure { .. } = cli.command {
        let b = cfg.bounds.get_or_insert_with(BoundsConfig::default);
        b.betas = default_beta_grid();
        b.horizons = default_horizon_grid();
    }

    let out = cli
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut run = Run { out, outputs: Vec::new() };

    match cli.command {
        Command::SolveHjb { .. } => cmd_solve_hjb(&cfg, &mut run)?,
        Command::RunFlow { .. } => cmd_run_flow(&cfg, &mut run)?,
        Command::SweepBounds { .. } | Command::ReproduceFigure { .. } => cmd_sweep_bounds(&cfg, &mut run)?,
        Command::McCheck { .. } => {
            let verdict = cmd_mc_check(&cfg, seed, &mut run)?;
            let manifest = finish(&cfg, seed, cli.command.name(), &mut run, started)?;
            return match verdict {
                Some(msg) => Err(Failure::Check(msg)),
                None => Ok(manifest),
            };
        }
    }
    finish(&cfg, seed, cli.command.name(), &mut run, started)
}

fn finish(cfg: &Config, seed: u64, command: &str, run: &mut Run, started: Instant) -> Result<RunManifest, Failure> {
    let path = run.out.join("manifest.json");
    let mut outputs = run.outputs.clone();
    outputs.push(path.clone());
    let manifest = RunManifest {
        command: command.to_string(),
        config_digest: cfg.digest(),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        wall_time: started.elapsed().as_secs_f64(),
        resolved_config: cfg.resolved(),
    };
    io::write_manifest(&path, &manifest)?;
    Ok(manifest)
}

fn tau_tag(tau: f64) -> String {
    format!("{tau}")
}

fn tolerance(cfg: &Config, problem: &ControlProblem) -> (f64, usize) {
    match &cfg.hjb {
        Some(h) => (h.tol.unwrap_or_else(|| default_tolerance(problem)), h.max_iter),
        None => (default_tolerance(problem), DEFAULT_MAX_ITER),
    }
}

pub fn cmd_solve_hjb(cfg: &Config, run: &mut Run) -> Result<(), Failure> {
    let problem = cfg.problem()?;
    let hjb = cfg.hjb.as_ref().ok_or(ConfigError::Missing("hjb"))?;
    if let Some(t) = hjb.taus.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(Failure::Validation(format!("invalid value for `hjb.taus`: {t}")));
    }
    let (tol, max_iter) = tolerance(cfg, &problem);
    let mut taus: Vec<f64> = hjb.taus.iter().copied().filter(|t| *t > 0.0).collect();
    taus.dedup();
    let solutions = taus
        .par_iter()
        .map(|&tau| solve_regularized_hjb(&problem, tau, tol, max_iter))
        .collect::<Result<Vec<_>, _>>()?;
    let unreg = solve_unregularized_hjb(&problem, tol, max_iter)?;
    for sol in solutions.iter().chain(std::iter::once(&unreg)) {
        let tag = tau_tag(sol.tau);
        io::write_hjb_solution(&run.path(&format!("hjb_tau_{tag}.csv")), &problem.grid, sol)?;
        io::write_residual_history(&run.path(&format!("hjb_tau_{tag}_residuals.csv")), &sol.residual_history)?;
    }
    Ok(())
}

fn select_records(traj: &FlowTrajectory, every: usize) -> FlowTrajectory {
    let last = traj.times.len() - 1;
    let keep: Vec<usize> = (0..=last).filter(|r| r % every == 0 || *r == last).collect();
    FlowTrajectory {
        times: keep.iter().map(|&r| traj.times[r]).collect(),
        taus: keep.iter().map(|&r| traj.taus[r]).collect(),
        probes: traj.probes.clone(),
        values_at_probe: keep.iter().map(|&r| traj.values_at_probe[r].clone()).collect(),
        unregularized_values: keep.iter().map(|&r| traj.unregularized_values[r].clone()).collect(),
        kl_mass: keep.iter().map(|&r| traj.kl_mass[r]).collect(),
        z_final: traj.z_final.clone(),
        step_count: traj.step_count,
        lipschitz_estimate: traj.lipschitz_estimate,
    }
}

pub fn cmd_run_flow(cfg: &Config, run: &mut Run) -> Result<(), Failure> {
    let problem = cfg.problem()?;
    let flow = cfg.flow.as_ref().ok_or(ConfigError::Missing("flow"))?;
    if flow.decompose_every == 0 {
        return Err(Failure::Validation("invalid value for `flow.decompose_every`: must be positive".into()));
    }
    let z0 = match &flow.z0 {
        Some(path) => {
            let m = io::read_matrix(Path::new(path)).map_err(|e| Failure::Validation(format!("invalid value for `flow.z0`: {e}")))?;
            FeatureField::new(m)
        }
        None => FeatureField::zeros(problem.n_interior(), problem.n_actions()),
    };
    let options = FlowOptions { record_every: flow.record_every, check_stability: flow.check_stability };
    let traj = integrate_flow(&problem, &z0, &flow.scheduler, flow.horizon, flow.dt, &flow.probes, options)?;
    io::write_trajectory(&run.path("trajectory.csv"), &traj)?;
    io::write_feature(&run.path("z_final.csv"), &traj.z_final)?;

    let (tol, max_iter) = tolerance(cfg, &problem);
    let sub = select_records(&traj, flow.decompose_every);
    let taus = distinct_taus(&sub);
    let reg = taus
        .par_iter()
        .map(|&tau| solve_regularized_hjb(&problem, tau, tol, max_iter))
        .collect::<Result<Vec<_>, _>>()?;
    let unreg = solve_unregularized_hjb(&problem, tol, max_iter)?;
    let rows = error_decomposition(&sub, &flow.scheduler, &reg, &unreg)?;
    io::write_decomposition(&run.path("decomposition.csv"), &problem.grid, &rows)?;
    Ok(())
}

pub fn cmd_sweep_bounds(cfg: &Config, run: &mut Run) -> Result<(), Failure> {
    let b = cfg.bounds.as_ref().ok_or(ConfigError::Missing("bounds"))?;
    if b.betas.is_empty() {
        return Err(Failure::Validation("invalid value for `bounds.betas`: empty grid".into()));
    }
    if b.horizons.is_empty() {
        return Err(Failure::Validation("invalid value for `bounds.horizons`: empty grid".into()));
    }
    let curves = reproduce_figure(&b.betas, &b.horizons, b.c, b.alpha)?;
    io::write_figure(&run.path("figure.csv"), &curves)?;
    if !b.growth.is_empty() {
        let mut rows = Vec::new();
        for sched in &b.growth {
            sched.validate()?;
            let name = scheduler_label(sched);
            for &s in &b.growth_s {
                rows.push((name.clone(), growth_integrals(sched, s)?));
            }
        }
        io::write_growth(&run.path("growth.csv"), &rows)?;
    }
    Ok(())
}

fn scheduler_label(sched: &Scheduler) -> String {
    match *sched {
        Scheduler::Constant { tau } => format!("constant({tau})"),
        Scheduler::HorizonConstant { horizon } => format!("horizon_constant({horizon})"),
        Scheduler::InverseLinear => "inverse_linear".into(),
        Scheduler::InverseSqrt => "inverse_sqrt".into(),
        Scheduler::PowerLaw { beta } => format!("power_law({beta})"),
    }
}

/// Linear interpolation of nodal values.
fn interpolate(problem: &ControlProblem, v: &[f64], x: f64) -> f64 {
    let g = &problem.grid;
    let t = (x - g.left) / g.spacing;
    let i = (t.floor() as usize).min(v.len() - 2);
    let w = t - i as f64;
    v[i] + w * (v[i + 1] - v[i])
}

/// Writes the comparison and returns a failure message if a probe misses its band.
pub fn cmd_mc_check(cfg: &Config, seed: u64, run: &mut Run) -> Result<Option<String>, Failure> {
    let problem = cfg.problem()?;
    let mc = cfg.mc.as_ref().ok_or(ConfigError::Missing("mc"))?;
    if mc.probes.is_empty() {
        return Err(Failure::Validation("invalid value for `mc.probes`: empty".into()));
    }
    if !(mc.tau >= 0.0) {
        return Err(Failure::Validation(format!("invalid value for `mc.tau`: {}", mc.tau)));
    }
    let (tol, max_iter) = tolerance(cfg, &problem);
    let policy: Policy = match mc.policy {
        McPolicy::Uniform => Policy::uniform(problem.n_interior(), &problem.actions),
        McPolicy::Optimal if mc.tau > 0.0 => solve_regularized_hjb(&problem, mc.tau, tol, max_iter)?.optimal_policy,
        McPolicy::Optimal => solve_unregularized_hjb(&problem, tol, max_iter)?.optimal_policy,
    };
    let pde_tau = mc.pde_tau.unwrap_or(mc.tau);
    let pde = solve_on_policy_bellman(&problem, &policy, pde_tau)?;

    let mut estimates = Vec::with_capacity(mc.probes.len());
    for (k, &x) in mc.probes.iter().enumerate() {
        estimates.push(simulate_exit_value(&problem, &policy, x, mc.tau, mc.n_paths, mc.dt_sim, seed.wrapping_add(k as u64))?);
    }
    let mut rows = Vec::with_capacity(estimates.len());
    let mut misses = Vec::new();
    for e in &estimates {
        let pde_value = interpolate(&problem, &pde.v, e.x0);
        let diff = e.mean - pde_value;
        let z_score = if e.stderr > 0.0 {
            diff / e.stderr
        } else if diff == 0.0 {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        if diff.abs() > 3.0 * e.stderr + mc.bias_allowance {
            misses.push(format!("x={} (z={z_score:.2})", e.x0));
        }
        rows.push(McCheckRow { x: e.x0, pde_value, mc_mean: e.mean, mc_stderr: e.stderr, z_score });
    }
    io::write_mc_check(&run.path("mc_check.csv"), &rows)?;
    io::write_mc_estimates(&run.path("mc_estimates.csv"), &estimates)?;
    Ok(if misses.is_empty() {
        None
    } else {
        Some(format!("Monte Carlo disagrees with the PDE beyond 3 stderr + {}: {}", mc.bias_allowance, misses.join(", ")))
    })
}
