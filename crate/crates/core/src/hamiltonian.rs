//! Soft-min (regularized) and hard-min Hamiltonians.

use crate::domain::{ActionKind, ActionSpace, ControlProblem};
use crate::error::{Error, Result};
use crate::special::ln_gaussian_integral;

/// Fine rule used for interval problems without LQ metadata once `τ` drops below the
/// resolution of the problem's own quadrature.
pub const FINE_N_QUAD: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianSample {
    pub x: f64,
    pub u: f64,
    pub p: f64,
    pub soft: f64,
    pub hard: f64,
    pub argmin_action: f64,
}

/// Row of a bias sweep for the interval-quadratic softmin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRow {
    pub tau: f64,
    pub p: f64,
    pub soft: f64,
    pub hard: f64,
    pub gap: f64,
    pub gap_over_tau_log: f64,
}

/// Smallest `τ` at which an `n`-node Gauss–Legendre rule still resolves `e^{-z/τ}`.
pub fn resolution_threshold(n_quad: usize) -> f64 {
    let r = 8.0 / n_quad as f64;
    r * r
}

/// `m − τ ln Σ w_k e^{−(z_k − m)/τ}`, `m = min z`.
pub fn softmin(z: &[f64], weights: &[f64], tau: f64) -> f64 {
    let m = z.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = z.iter().zip(weights).map(|(z, w)| w * (-(z - m) / tau).exp()).sum();
    m - tau * s.ln()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}

/// Soft-min over the problem's own action nodes and μ weights.
pub fn node_softmin(problem: &ControlProblem, x: f64, u: f64, p: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(softmin_on(problem, &problem.actions, x, u, p, tau))
}

fn softmin_on(problem: &ControlProblem, actions: &ActionSpace, x: f64, u: f64, p: f64, tau: f64) -> f64 {
    let z: Vec<f64> = actions.actions.iter().map(|&a| problem.integrand(x, a, u, p)).collect();
    softmin(&z, &actions.mu_weights, tau)
}

/// Regularized Hamiltonian `H_τ(x, u, p)`.
///
/// Discrete spaces and well-resolved interval spaces use the node quadrature. Below the
/// resolution threshold an LQ interval problem switches to the closed form and any other
/// interval problem to a fine rule.
pub fn soft_hamiltonian(problem: &ControlProblem, x: f64, u: f64, p: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let ActionKind::Interval { alpha, beta } = problem.actions.kind else {
        return Ok(softmin_on(problem, &problem.actions, x, u, p, tau));
    };
    if tau >= resolution_threshold(problem.n_actions()) {
        return Ok(softmin_on(problem, &problem.actions, x, u, p, tau));
    }
    if problem.lq.is_some() {
        let (k, q, fh) = lq_reduction(problem, x, u, p);
        return Ok(k + 2.0 * fh * interval_quadratic_softmin(q / (2.0 * fh), tau / (2.0 * fh), alpha, beta)?);
    }
    let fine = ActionSpace::interval(alpha, beta, FINE_N_QUAD.max(problem.n_actions()))?;
    Ok(softmin_on(problem, &fine, x, u, p, tau))
}

/// `z(a) = K + q·a + f̂·a²`; returns `(K, q, f̂)`.
///
/// Dividing by `2f̂` turns the soft-min into `K + 2f̂·𝔥_{τ/2f̂}(q/2f̂)` and the hard min
/// into `K + 2f̂·𝔥(q/2f̂)`.
pub fn lq_reduction(problem: &ControlProblem, x: f64, u: f64, p: f64) -> (f64, f64, f64) {
    let c = problem.lq.as_ref().expect("LQ metadata").at(x);
    let k = c.b_bar * p - c.c_bar * u + c.f_bar;
    let q = c.b_hat * p - c.c_hat * u + c.f_tilde;
    (k, q, c.f_hat)
}

/// Hard Hamiltonian `H(x, u, p)` and a minimizing action.
pub fn hard_hamiltonian(problem: &ControlProblem, x: f64, u: f64, p: f64) -> (f64, f64) {
    let actions = &problem.actions;
    match actions.kind {
        ActionKind::Discrete => {
            let mut best = (f64::INFINITY, f64::INFINITY);
            for &a in &actions.actions {
                let z = problem.integrand(x, a, u, p);
                if z < best.0 || (z == best.0 && a < best.1) {
                    best = (z, a);
                }
            }
            best
        }
        ActionKind::Interval { alpha, beta } => {
            if problem.lq.is_some() {
                let (k, q, fh) = lq_reduction(problem, x, u, p);
                let a = (-q / (2.0 * fh)).clamp(alpha, beta);
                return (k + q * a + fh * a * a, a);
            }
            let f = |a: f64| problem.integrand(x, a, u, p);
            let mut pts = Vec::with_capacity(actions.len() + 2);
            pts.push(alpha);
            pts.extend_from_slice(&actions.actions);
            pts.push(beta);
            let (j, _) = pts
                .iter()
                .map(|&a| f(a))
                .enumerate()
                .fold((0, f64::INFINITY), |best, (j, v)| if v < best.1 { (j, v) } else { best });
            let lo = pts[j.saturating_sub(1)];
            let hi = pts[(j + 1).min(pts.len() - 1)];
            let a = golden_section(&f, lo, hi, 1e-10);
            let (mut val, mut arg) = (f(a), a);
            if f(pts[j]) < val {
                val = f(pts[j]);
                arg = pts[j];
            }
            (val, arg)
        }
    }
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// `𝔥_τ(p) = −τ ln( (β−α)^{-1} ∫_α^β e^{−(pa + a²/2)/τ} da )` in closed form.
pub fn interval_quadratic_softmin(p: f64, tau: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_tau(tau)?;
    if !(alpha < beta) {
        return Err(Error::InvalidArgument(format!("need alpha < beta, got [{alpha}, {beta}]")));
    }
    let s = (2.0 * tau).sqrt();
    let l = (alpha + p) / s;
    let r = (beta + p) / s;
    let base = tau * (beta - alpha).ln() - 0.5 * tau * (2.0 * tau).ln();
    // ln ∫_l^r e^{-t²} = −lo² + ln(scaled); the −lo² term cancels against p²/2τ analytically
    let completed = if l >= 0.0 {
        alpha * p + 0.5 * alpha * alpha - tau * (ln_gaussian_integral(l, r) + l * l)
    } else if r <= 0.0 {
        beta * p + 0.5 * beta * beta - tau * (ln_gaussian_integral(l, r) + r * r)
    } else {
        -0.5 * p * p - tau * ln_gaussian_integral(l, r)
    };
    Ok(base + completed)
}

/// `𝔥(p) = min_{a∈[α,β]} pa + a²/2`.
pub fn interval_quadratic_min(p: f64, alpha: f64, beta: f64) -> f64 {
    let a = (-p).clamp(alpha, beta);
    p * a + 0.5 * a * a
}

/// Largest `H_τ − H` over the samples, for a discrete action space.
pub fn discrete_bias_gap(problem: &ControlProblem, samples: &[(f64, f64, f64)], tau: f64) -> Result<f64> {
    if !problem.actions.is_discrete() {
        return Err(Error::NotDiscrete);
    }
    check_tau(tau)?;
    let mut gap = f64::NEG_INFINITY;
    for &(x, u, p) in samples {
        let soft = soft_hamiltonian(problem, x, u, p, tau)?;
        let (hard, _) = hard_hamiltonian(problem, x, u, p);
        gap = gap.max(soft - hard);
    }
    Ok(gap)
}

pub fn sample(problem: &ControlProblem, x: f64, u: f64, p: f64, tau: f64) -> Result<HamiltonianSample> {
    let soft = soft_hamiltonian(problem, x, u, p, tau)?;
    let (hard, argmin_action) = hard_hamiltonian(problem, x, u, p);
    Ok(HamiltonianSample { x, u, p, soft, hard, argmin_action })
}

/// `𝔥_τ − 𝔥` on a `τ × p` grid.
pub fn bias_sweep(taus: &[f64], ps: &[f64], alpha: f64, beta: f64) -> Result<Vec<BiasRow>> {
    let mut rows = Vec::with_capacity(taus.len() * ps.len());
    for &tau in taus {
        for &p in ps {
            let soft = interval_quadratic_softmin(p, tau, alpha, beta)?;
            let hard = interval_quadratic_min(p, alpha, beta);
            let gap = soft - hard;
            rows.push(BiasRow { tau, p, soft, hard, gap, gap_over_tau_log: gap / (tau * (1.0 / tau).ln()) });
        }
    }
    Ok(rows)
}
