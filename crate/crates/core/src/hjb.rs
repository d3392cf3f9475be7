//! Regularized and unregularized HJB equations solved by policy iteration.

use ndarray::Array2;
use rayon::prelude::*;

use crate::domain::{ActionKind, ControlProblem, Convection};
use crate::elliptic::{
    average_coefficients, forcing, per_action_generator, solve_linear, solve_on_policy_bellman, AveragedCoefficients,
    ValueField,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{hard_hamiltonian, softmin};
use crate::policy::{gibbs_policy, FeatureField, Policy};

pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct HjbSolution {
    pub v_star: ValueField,
    pub tau: f64,
    pub iterations: usize,
    pub final_residual: f64,
    /// Gibbs policy for `τ > 0`; one-hot on the nearest action node for `τ = 0`.
    pub optimal_policy: Policy,
    /// Minimizing action per interior node; off the action nodes for continuous selections.
    pub selected_actions: Vec<f64>,
    pub residual_history: Vec<f64>,
}

/// `1e-9·(1 + ‖f‖_∞)`.
pub fn default_tolerance(problem: &ControlProblem) -> f64 {
    1e-9 * (1.0 + problem.cost_sup())
}

/// `Z*[i,k] = b(x_i,a_k)·dv[i] − c(x_i,a_k)·v[i] + f(x_i,a_k)`.
pub fn optimal_feature(problem: &ControlProblem, v: &ValueField) -> FeatureField {
    let t = &problem.table;
    let n = problem.n_interior();
    let m = problem.n_actions();
    FeatureField::new(Array2::from_shape_fn((n, m), |(i, k)| {
        t.drift[[i, k]] * v.dv[i] - t.discount[[i, k]] * v.v[i + 1] + t.cost[[i, k]]
    }))
}

/// Per-action `ℒ^{a_k} v + f` on the discrete operator; equals `½σ²v″ + Z*` under central differences.
fn discrete_hamiltonian_args(problem: &ControlProblem, v: &ValueField) -> Array2<f64> {
    per_action_generator(problem, &v.v) + &problem.table.cost
}

/// `max_i |½σ²v″ + H_τ(x_i, v_i, Dv_i)|` with `H_τ` taken over the problem's action nodes.
pub fn regularized_residual(problem: &ControlProblem, v: &ValueField, tau: f64) -> f64 {
    let args = discrete_hamiltonian_args(problem, v);
    args.outer_iter()
        .map(|row| softmin(row.as_slice().expect("row-major"), &problem.actions.mu_weights, tau).abs())
        .fold(0.0, f64::max)
}

fn improved_policy(problem: &ControlProblem, v: &ValueField, tau: f64) -> Result<(FeatureField, Policy)> {
    // the diffusion part is constant along each row and drops out of the Gibbs map
    let z = FeatureField::new(discrete_hamiltonian_args(problem, v).mapv(|z| -z / tau));
    let p = gibbs_policy(&z, &problem.actions)?;
    Ok((z, p))
}

/// `v*_τ` by soft policy iteration from the reference measure.
pub fn solve_regularized_hjb(problem: &ControlProblem, tau: f64, tol: f64, max_iter: usize) -> Result<HjbSolution> {
    let z0 = FeatureField::zeros(problem.n_interior(), problem.n_actions());
    solve_regularized_hjb_from(problem, &z0, tau, tol, max_iter)
}

/// Soft policy iteration from the Gibbs policy of `z0`.
pub fn solve_regularized_hjb_from(
    problem: &ControlProblem,
    z0: &FeatureField,
    tau: f64,
    tol: f64,
    max_iter: usize,
) -> Result<HjbSolution> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidTau(tau));
    }
    let mut policy = gibbs_policy(z0, &problem.actions)?;
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let v = solve_on_policy_bellman(problem, &policy, tau)?;
        let res = regularized_residual(problem, &v, tau);
        history.push(res);
        if !res.is_finite() {
            return Err(Error::NoConvergence { iterations: it, residuals: history });
        }
        if res <= tol {
            let selected_actions = modal_actions(problem, &policy);
            return Ok(HjbSolution {
                v_star: v,
                tau,
                iterations: it,
                final_residual: res,
                optimal_policy: policy,
                selected_actions,
                residual_history: history,
            });
        }
        policy = improved_policy(problem, &v, tau)?.1;
    }
    Err(Error::NoConvergence { iterations: max_iter, residuals: history })
}

fn modal_actions(problem: &ControlProblem, p: &Policy) -> Vec<f64> {
    p.weights
        .outer_iter()
        .map(|row| {
            let k = row.iter().enumerate().fold(0, |b, (k, w)| if *w > row[b] { k } else { b });
            problem.actions.actions[k]
        })
        .collect()
}

/// Whether the hard minimization runs over the continuum instead of the action nodes.
fn continuous_selection(problem: &ControlProblem) -> bool {
    matches!(problem.actions.kind, ActionKind::Interval { .. }) && problem.convection == Convection::Central
}

/// Greedy node selection `argmin_k ℒ^{a_k} v + f`, ties to the smallest action.
pub fn greedy_selection(problem: &ControlProblem, v: &ValueField) -> Vec<usize> {
    let args = discrete_hamiltonian_args(problem, v);
    let acts = &problem.actions.actions;
    args.outer_iter()
        .map(|row| {
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] < row[best] || (row[k] == row[best] && acts[k] < acts[best]) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// `max_i |½σ²v″ + H(x_i, v_i, Dv_i)|`.
pub fn unregularized_residual(problem: &ControlProblem, v: &ValueField) -> f64 {
    if continuous_selection(problem) {
        let h2 = problem.grid.spacing * problem.grid.spacing;
        (0..problem.n_interior())
            .map(|i| {
                let second = problem.table.diffusion[i] * (v.v[i + 2] - 2.0 * v.v[i + 1] + v.v[i]) / h2;
                (second + hard_hamiltonian(problem, problem.grid.x(i), v.v[i + 1], v.dv[i]).0).abs()
            })
            .fold(0.0, f64::max)
    } else {
        let args = discrete_hamiltonian_args(problem, v);
        args.outer_iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min).abs()).fold(0.0, f64::max)
    }
}

fn nearest_node(problem: &ControlProblem, a: f64) -> usize {
    let acts = &problem.actions.actions;
    (0..acts.len()).fold(0, |b, k| if (acts[k] - a).abs() < (acts[b] - a).abs() { k } else { b })
}

/// `v*_0` by Howard iteration with hard minimization.
pub fn solve_unregularized_hjb(problem: &ControlProblem, tol: f64, max_iter: usize) -> Result<HjbSolution> {
    let n = problem.n_interior();
    let continuous = continuous_selection(problem);
    // start from the action closest to the middle of the range
    let (lo, hi) = problem.actions.range();
    let start = nearest_node(problem, 0.5 * (lo + hi));
    let mut nodes = vec![start; n];
    let mut actions: Vec<f64> = vec![problem.actions.actions[start]; n];
    let mut seen: Vec<Vec<usize>> = Vec::new();
    let mut history = Vec::new();
    for it in 1..=max_iter {
        let v = if continuous {
            let coeffs = AveragedCoefficients::from_actions(problem, &actions);
            solve_linear(problem, &coeffs, &forcing(&coeffs, 0.0), problem.table.g_left, problem.table.g_right, 0.0)?
        } else {
            solve_on_policy_bellman(problem, &Policy::one_hot(&nodes, &problem.actions), 0.0)?
        };
        let res = unregularized_residual(problem, &v);
        history.push(res);
        let finish = |v: ValueField, actions: Vec<f64>, nodes: &[usize], history: Vec<f64>| HjbSolution {
            v_star: v,
            tau: 0.0,
            iterations: it,
            final_residual: res,
            optimal_policy: Policy::one_hot(nodes, &problem.actions),
            selected_actions: actions,
            residual_history: history,
        };
        if res <= tol {
            return Ok(finish(v, actions, &nodes, history));
        }
        if continuous {
            let next: Vec<f64> =
                (0..n).map(|i| hard_hamiltonian(problem, problem.grid.x(i), v.v[i + 1], v.dv[i]).1).collect();
            let change = next.iter().zip(&actions).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            if change == 0.0 {
                return Ok(finish(v, actions, &nodes, history));
            }
            nodes = next.iter().map(|&a| nearest_node(problem, a)).collect();
            actions = next;
        } else {
            let next = greedy_selection(problem, &v);
            if next == nodes {
                return Ok(finish(v, actions, &nodes, history));
            }
            if seen.contains(&next) {
                return Err(Error::Cycling { iteration: it, residual: res });
            }
            seen.push(nodes.clone());
            actions = next.iter().map(|&k| problem.actions.actions[k]).collect();
            nodes = next;
        }
    }
    Err(Error::NoConvergence { iterations: max_iter, residuals: history })
}

/// `(τ, ‖v*_τ − v*_0‖_∞)` for each `τ`.
pub fn regularization_bias(problem: &ControlProblem, taus: &[f64], tol: f64) -> Result<Vec<(f64, f64)>> {
    let v0 = solve_unregularized_hjb(problem, tol, DEFAULT_MAX_ITER)?;
    taus.par_iter()
        .map(|&tau| {
            let s = solve_regularized_hjb(problem, tau, tol, DEFAULT_MAX_ITER)?;
            let sup = s.v_star.v.iter().zip(&v0.v_star.v).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            Ok((tau, sup))
        })
        .collect()
}

/// Discounted occupancy mass `E_x[∫_0^{τ_𝒪} e^{-∫c} dt]` under `p`: the value of unit running cost.
pub fn occupancy_mass(problem: &ControlProblem, p: &Policy) -> Result<ValueField> {
    let mut coeffs = average_coefficients(problem, p)?;
    coeffs.f_bar.iter_mut().for_each(|f| *f = 1.0);
    solve_linear(problem, &coeffs, &coeffs.f_bar.clone(), 0.0, 0.0, 0.0)
}
