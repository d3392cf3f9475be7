//! Mirror-descent flow `∂_s Z = −(ℒ̄^a v^{π(Z)}_{τ_s} + f + τ_s Z)` integrated with classical RK4.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::domain::{ControlProblem, Convection};
use crate::elliptic::{average_coefficients, forcing, per_action_generator, solve_linear, ValueField};
use crate::error::{Error, Result};
use crate::hjb::{optimal_feature, HjbSolution};
use crate::policy::{gibbs_policy, FeatureField};

/// Annealing schedules `s ↦ τ_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheduler {
    Constant { tau: f64 },
    /// `ln(S+1)/S` for horizon `S`.
    HorizonConstant { horizon: f64 },
    /// `1/(1+s)`
    InverseLinear,
    /// `1/√(1+s)`
    InverseSqrt,
    /// `1/(1+s)^β`
    PowerLaw { beta: f64 },
}

impl Scheduler {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Scheduler::Constant { tau } => tau > 0.0 && tau.is_finite(),
            Scheduler::HorizonConstant { horizon } => horizon > 0.0 && horizon.is_finite(),
            Scheduler::PowerLaw { beta } => beta >= 0.0 && beta.is_finite(),
            Scheduler::InverseLinear | Scheduler::InverseSqrt => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scheduler {self:?}")))
        }
    }

    pub fn value(&self, s: f64) -> f64 {
        match *self {
            Scheduler::Constant { tau } => tau,
            Scheduler::HorizonConstant { horizon } => horizon.ln_1p() / horizon,
            Scheduler::InverseLinear => 1.0 / (1.0 + s),
            Scheduler::InverseSqrt => 1.0 / (1.0 + s).sqrt(),
            Scheduler::PowerLaw { beta } => (-beta * s.ln_1p()).exp(),
        }
    }

    /// `Φ(s) = ∫_0^s τ_r dr`.
    pub fn integral(&self, s: f64) -> f64 {
        match *self {
            Scheduler::Constant { .. } | Scheduler::HorizonConstant { .. } => self.value(0.0) * s,
            Scheduler::InverseLinear => s.ln_1p(),
            Scheduler::InverseSqrt => 2.0 * (1.0 + s).sqrt() - 2.0,
            Scheduler::PowerLaw { beta } => {
                let l = s.ln_1p();
                if (beta - 1.0).abs() < 1e-12 {
                    l
                } else {
                    // ((1+s)^{1-β} − 1)/(1−β)
                    ((1.0 - beta) * l).exp_m1() / (1.0 - beta)
                }
            }
        }
    }
}

/// `scheduler_value`
pub fn scheduler_value(sched: &Scheduler, s: f64) -> f64 {
    sched.value(s)
}

/// Feature `ℒ^a v + f` minus the action-independent diffusion term, on the problem's stencil.
fn flow_feature(problem: &ControlProblem, v: &ValueField) -> Array2<f64> {
    match problem.convection {
        Convection::Central => optimal_feature(problem, v).values,
        Convection::Upwind => {
            let h2 = problem.grid.spacing * problem.grid.spacing;
            let mut g = per_action_generator(problem, &v.v) + &problem.table.cost;
            for (i, mut row) in g.outer_iter_mut().enumerate() {
                let second = problem.table.diffusion[i] * (v.v[i + 2] - 2.0 * v.v[i + 1] + v.v[i]) / h2;
                row -= second;
            }
            g
        }
    }
}

/// `rhs[i,k] = −(b·dv − c·v + f + τ·Z)`.
pub fn mirror_rhs(problem: &ControlProblem, z: &FeatureField, v: &ValueField, tau: f64) -> FeatureField {
    let mut out = flow_feature(problem, v);
    out.zip_mut_with(&z.values, |r, z| *r = -(*r + tau * z));
    FeatureField::new(out)
}

/// Regularized and unregularized values of `π(Z)`.
pub fn policy_values(problem: &ControlProblem, z: &FeatureField, tau: f64) -> Result<(ValueField, ValueField)> {
    let p = gibbs_policy(z, &problem.actions)?;
    let coeffs = average_coefficients(problem, &p)?;
    let (gl, gr) = (problem.table.g_left, problem.table.g_right);
    let v_tau = solve_linear(problem, &coeffs, &forcing(&coeffs, tau), gl, gr, tau)?;
    let v_0 = solve_linear(problem, &coeffs, &forcing(&coeffs, 0.0), gl, gr, 0.0)?;
    Ok((v_tau, v_0))
}

fn rhs_at(problem: &ControlProblem, z: &FeatureField, tau: f64) -> Result<FeatureField> {
    let p = gibbs_policy(z, &problem.actions)?;
    let coeffs = average_coefficients(problem, &p)?;
    let v = solve_linear(problem, &coeffs, &forcing(&coeffs, tau), problem.table.g_left, problem.table.g_right, tau)?;
    Ok(mirror_rhs(problem, z, &v, tau))
}

/// Lipschitz estimate of `Z ↦ rhs(Z) + τZ` from a finite-difference probe at `z`.
pub fn lipschitz_estimate(problem: &ControlProblem, z: &FeatureField, tau: f64) -> Result<f64> {
    let (n, m) = z.shape();
    let eps = 1e-6 * (1.0 + z.max_abs());
    let mut worst = 0.0f64;
    for pattern in 0..3 {
        let dir = Array2::from_shape_fn((n, m), |(i, k)| match pattern {
            0 => (k as f64 / m.max(2) as f64 - 0.5) * 2.0,
            1 => if (i + k) % 2 == 0 { 1.0 } else { -1.0 },
            _ => ((i * 31 + k * 17) % 13) as f64 / 6.0 - 1.0,
        });
        let base = rhs_at(problem, z, tau)?;
        let bumped = rhs_at(problem, &FeatureField::new(&z.values + &(eps * &dir)), tau)?;
        let diff = (&bumped.values - &base.values) / eps + tau * &dir;
        let ratio = diff.iter().fold(0.0f64, |a, d| a.max(d.abs())) / dir.iter().fold(0.0f64, |a, d| a.max(d.abs()));
        worst = worst.max(ratio);
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowTrajectory {
    pub times: Vec<f64>,
    pub taus: Vec<f64>,
    /// Full-grid node indices of the probes.
    pub probes: Vec<usize>,
    /// `v^{π(Z_s)}_{τ_s}` at each probe, one row per record.
    pub values_at_probe: Vec<Vec<f64>>,
    /// `v^{π(Z_s)}_0` at each probe.
    pub unregularized_values: Vec<Vec<f64>>,
    /// `sup_x E[∫ Γ KL(π|μ) dt]`, i.e. `sup (v_τ − v_0)/τ`.
    pub kl_mass: Vec<f64>,
    pub z_final: FeatureField,
    pub step_count: usize,
    pub lipschitz_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowOptions {
    pub record_every: usize,
    /// Enforce `dt·(τ_0 + L_est) ≤ 1`.
    pub check_stability: bool,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { record_every: 1, check_stability: true }
    }
}

/// Integrates the flow on `[0, horizon]` and records probe values.
#[allow(clippy::too_many_arguments)]
pub fn integrate_flow(
    problem: &ControlProblem,
    z0: &FeatureField,
    sched: &Scheduler,
    horizon: f64,
    dt: f64,
    probes: &[usize],
    options: FlowOptions,
) -> Result<FlowTrajectory> {
    sched.validate()?;
    if !(dt > 0.0 && dt.is_finite()) || !(horizon >= dt) {
        return Err(Error::InvalidArgument(format!("need 0 < dt <= horizon, got dt={dt}, horizon={horizon}")));
    }
    if z0.shape() != (problem.n_interior(), problem.n_actions()) {
        return Err(Error::ShapeMismatch(format!("initial feature {:?}", z0.shape())));
    }
    if let Some(&bad) = probes.iter().find(|&&j| j == 0 || j > problem.n_interior()) {
        return Err(Error::InvalidArgument(format!("probe {bad} is not an interior node")));
    }
    if options.record_every == 0 {
        return Err(Error::InvalidArgument("record_every must be positive".into()));
    }
    let tau0 = sched.value(0.0);
    let l_est = lipschitz_estimate(problem, z0, tau0)?;
    if options.check_stability && dt * (tau0 + l_est) > 1.0 {
        return Err(Error::StepTooLarge { dt, dt_max: 1.0 / (tau0 + l_est) });
    }

    let n_steps = (horizon / dt - 1e-9).ceil() as usize;
    let mut traj = FlowTrajectory {
        times: Vec::new(),
        taus: Vec::new(),
        probes: probes.to_vec(),
        values_at_probe: Vec::new(),
        unregularized_values: Vec::new(),
        kl_mass: Vec::new(),
        z_final: z0.clone(),
        step_count: 0,
        lipschitz_estimate: l_est,
    };
    let record = |traj: &mut FlowTrajectory, z: &FeatureField, s: f64| -> Result<()> {
        let tau = sched.value(s);
        let (vt, v0) = policy_values(problem, z, tau)?;
        traj.times.push(s);
        traj.taus.push(tau);
        traj.values_at_probe.push(probes.iter().map(|&j| vt.v[j]).collect());
        traj.unregularized_values.push(probes.iter().map(|&j| v0.v[j]).collect());
        let mass = vt.v.iter().zip(&v0.v).fold(0.0f64, |m, (a, b)| m.max((a - b) / tau));
        traj.kl_mass.push(mass);
        Ok(())
    };

    let mut z = z0.clone();
    record(&mut traj, &z, 0.0)?;
    for step in 1..=n_steps {
        let s = (step - 1) as f64 * dt;
        let h = if step == n_steps { horizon - s } else { dt };
        let (t1, t2, t3) = (sched.value(s), sched.value(s + 0.5 * h), sched.value(s + h));
        let k1 = rhs_at(problem, &z, t1)?.values;
        let k2 = rhs_at(problem, &FeatureField::new(&z.values + &(0.5 * h * &k1)), t2)?.values;
        let k3 = rhs_at(problem, &FeatureField::new(&z.values + &(0.5 * h * &k2)), t2)?.values;
        let k4 = rhs_at(problem, &FeatureField::new(&z.values + &(h * &k3)), t3)?.values;
        z.values = &z.values + &((h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        if !z.is_finite() {
            return Err(Error::NonFiniteState { step, max_abs: z.max_abs() });
        }
        traj.step_count = step;
        if step % options.record_every == 0 || step == n_steps {
            let t = if step == n_steps { horizon } else { step as f64 * dt };
            record(&mut traj, &z, t)?;
        }
    }
    traj.z_final = z;
    Ok(traj)
}

/// The three terms of `v^π_0 − v*_0` at one record and probe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    pub s: f64,
    pub tau: f64,
    pub probe: usize,
    /// `v^π_0 − v^π_τ ≤ 0`
    pub negative_kl_term: f64,
    /// `v^π_τ − v*_τ ≥ 0`
    pub optimization_error: f64,
    /// `v*_τ − v*_0 ≥ 0`
    pub regularization_bias: f64,
    /// `v^π_0 − v*_0`
    pub total: f64,
}

/// Splits the unregularized error of every record into KL, optimization and bias terms.
///
/// `hjb_reg` must contain a regularized solution for each `τ_s` on the trajectory.
pub fn error_decomposition(
    traj: &FlowTrajectory,
    sched: &Scheduler,
    hjb_reg: &[HjbSolution],
    hjb_unreg: &HjbSolution,
) -> Result<Vec<Decomposition>> {
    let mut out = Vec::with_capacity(traj.times.len() * traj.probes.len());
    for (r, (&s, &tau)) in traj.times.iter().zip(&traj.taus).enumerate() {
        let expected = sched.value(s);
        if (expected - tau).abs() > 1e-12 * expected {
            return Err(Error::TauMismatch { index: r, expected, found: tau });
        }
        let sol = hjb_reg
            .iter()
            .find(|h| (h.tau - tau).abs() <= 1e-12 * tau)
            .ok_or(Error::TauMismatch { index: r, expected: tau, found: f64::NAN })?;
        for (j, &node) in traj.probes.iter().enumerate() {
            let vt = traj.values_at_probe[r][j];
            let v0 = traj.unregularized_values[r][j];
            let star_t = sol.v_star.v[node];
            let star_0 = hjb_unreg.v_star.v[node];
            out.push(Decomposition {
                s,
                tau,
                probe: node,
                negative_kl_term: v0 - vt,
                optimization_error: vt - star_t,
                regularization_bias: star_t - star_0,
                total: v0 - star_0,
            });
        }
    }
    Ok(out)
}

/// Distinct `τ_s` values on a trajectory, in record order.
pub fn distinct_taus(traj: &FlowTrajectory) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for &t in &traj.taus {
        if !out.iter().any(|u| (u - t).abs() <= 1e-12 * t) {
            out.push(t);
        }
    }
    out
}
