//! Feynman–Kac Monte Carlo for the value of a fixed policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::domain::ControlProblem;
use crate::elliptic::average_coefficients;
use crate::error::{Error, Result};
use crate::policy::Policy;

pub const STEP_CAP: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub x0: f64,
    pub tau: f64,
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub mean_exit_time: f64,
    pub dt_sim: f64,
    pub seed: u64,
}

/// Nodal tables on the full grid; the end cells repeat the nearest interior value.
struct Tables {
    left: f64,
    h: f64,
    drift: Vec<f64>,
    discount: Vec<f64>,
    running: Vec<f64>,
    discounted: bool,
}

impl Tables {
    fn new(problem: &ControlProblem, p: &Policy, tau: f64) -> Result<Self> {
        let c = average_coefficients(problem, p)?;
        let pad = |v: Vec<f64>| {
            let mut out = Vec::with_capacity(v.len() + 2);
            out.push(v[0]);
            out.extend_from_slice(&v);
            out.push(v[v.len() - 1]);
            out
        };
        let running: Vec<f64> = c.f_bar.iter().zip(&c.kl).map(|(f, k)| if tau == 0.0 { *f } else { f + tau * k }).collect();
        let discounted = c.c_bar.iter().any(|v| *v != 0.0);
        Ok(Self {
            left: problem.grid.left,
            h: problem.grid.spacing,
            drift: pad(c.b_bar),
            discount: pad(c.c_bar),
            running: pad(running),
            discounted,
        })
    }

    #[inline]
    fn locate(&self, x: f64) -> (usize, f64) {
        let t = (x - self.left) / self.h;
        let i = (t.floor() as isize).clamp(0, self.drift.len() as isize - 2) as usize;
        (i, t - i as f64)
    }

    #[inline]
    fn lerp(v: &[f64], i: usize, w: f64) -> f64 {
        v[i] + w * (v[i + 1] - v[i])
    }
}

/// Simulates `n_paths` Euler–Maruyama paths from `x0` to exit.
///
/// Path `k` draws from the ChaCha8 stream `k` of `seed`, so results do not depend on
/// thread scheduling.
pub fn simulate_exit_value(
    problem: &ControlProblem,
    p: &Policy,
    x0: f64,
    tau: f64,
    n_paths: usize,
    dt_sim: f64,
    seed: u64,
) -> Result<McEstimate> {
    if !problem.grid.contains(x0) {
        return Err(Error::InvalidArgument(format!("x0 = {x0} is not inside the domain")));
    }
    if !(dt_sim > 0.0 && dt_sim.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt_sim must be positive, got {dt_sim}")));
    }
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be nonnegative, got {tau}")));
    }
    let tables = Tables::new(problem, p, tau)?;
    let (left, right) = (problem.grid.left, problem.grid.right);
    let (g_left, g_right) = (problem.table.g_left, problem.table.g_right);
    let sqrt_dt = dt_sim.sqrt();

    let path = |k: usize| -> Result<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let mut x = x0;
        let mut gamma = 1.0;
        let mut acc = 0.0;
        let mut steps: u64 = 0;
        loop {
            let (i, w) = tables.locate(x);
            let b = Tables::lerp(&tables.drift, i, w);
            acc += gamma * Tables::lerp(&tables.running, i, w) * dt_sim;
            if tables.discounted {
                gamma *= (-Tables::lerp(&tables.discount, i, w) * dt_sim).exp();
            }
            let xi: f64 = StandardNormal.sample(&mut rng);
            x += b * dt_sim + (problem.sigma)(x) * sqrt_dt * xi;
            steps += 1;
            if x <= left {
                return Ok((acc + gamma * g_left, steps as f64 * dt_sim));
            }
            if x >= right {
                return Ok((acc + gamma * g_right, steps as f64 * dt_sim));
            }
            if steps >= STEP_CAP {
                return Err(Error::StepCapExceeded { path: k, steps });
            }
        }
    };
    let samples: Vec<(f64, f64)> = (0..n_paths).into_par_iter().map(path).collect::<Result<_>>()?;

    let n = n_paths as f64;
    let mean = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_exit_time = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let stderr = if n_paths > 1 {
        let var = samples.iter().map(|s| (s.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { x0, tau, mean, stderr, n_paths, mean_exit_time, dt_sim, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{constant, ActionSpace, Grid, StateActionFn};
    use std::sync::Arc;

    fn manufactured(f: f64, g: f64) -> ControlProblem {
        let zero: StateActionFn = Arc::new(|_, _| 0.0);
        let cost: StateActionFn = Arc::new(move |_, _| f);
        ControlProblem::new(
            Grid::new(0.0, 1.0, 19).unwrap(),
            ActionSpace::discrete(&[0.0]).unwrap(),
            zero.clone(),
            zero,
            cost,
            constant(std::f64::consts::SQRT_2),
            constant(g),
        )
        .unwrap()
    }

    #[test]
    fn manufactured_value() {
        let prob = manufactured(2.0, 0.0);
        let p = Policy::uniform(19, &prob.actions);
        let est = simulate_exit_value(&prob, &p, 0.5, 0.0, 20_000, 1e-4, 1).unwrap();
        // v = x(1−x); discrete monitoring misses exits, biasing the mean up by O(√dt)
        assert!((est.mean - 0.25).abs() <= 3.0 * est.stderr + 5e-3, "{est:?}");
        assert!((est.mean_exit_time - 0.125).abs() < 0.01);
    }

    #[test]
    fn constant_boundary_payoff() {
        let prob = manufactured(0.0, 1.0);
        let p = Policy::uniform(19, &prob.actions);
        let est = simulate_exit_value(&prob, &p, 0.3, 0.0, 500, 1e-3, 9).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let prob = manufactured(2.0, 0.0);
        let p = Policy::uniform(19, &prob.actions);
        let a = simulate_exit_value(&prob, &p, 0.4, 0.0, 2000, 1e-3, 42).unwrap();
        let b = simulate_exit_value(&prob, &p, 0.4, 0.0, 2000, 1e-3, 42).unwrap();
        let c = simulate_exit_value(&prob, &p, 0.4, 0.0, 2000, 1e-3, 43).unwrap();
        assert_eq!(a.mean.to_bits(), b.mean.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
        assert_ne!(a.mean, c.mean);
    }

    #[test]
    fn stderr_scales_with_paths() {
        let prob = manufactured(2.0, 0.0);
        let p = Policy::uniform(19, &prob.actions);
        let a = simulate_exit_value(&prob, &p, 0.5, 0.0, 10_000, 1e-3, 5).unwrap();
        let b = simulate_exit_value(&prob, &p, 0.5, 0.0, 40_000, 1e-3, 5).unwrap();
        let ratio = a.stderr / b.stderr;
        assert!((ratio / 2.0 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn exit_time_stable_under_refinement() {
        let prob = manufactured(2.0, 0.0);
        let p = Policy::uniform(19, &prob.actions);
        let a = simulate_exit_value(&prob, &p, 0.5, 0.0, 10_000, 2e-4, 5).unwrap();
        let b = simulate_exit_value(&prob, &p, 0.5, 0.0, 10_000, 1e-4, 5).unwrap();
        assert!((a.mean_exit_time / b.mean_exit_time - 1.0).abs() < 0.1);
    }

    #[test]
    fn rejects_bad_input() {
        let prob = manufactured(2.0, 0.0);
        let p = Policy::uniform(19, &prob.actions);
        assert!(simulate_exit_value(&prob, &p, 0.0, 0.0, 10, 1e-3, 1).is_err());
        assert!(simulate_exit_value(&prob, &p, 0.5, 0.0, 0, 1e-3, 1).is_err());
        assert!(simulate_exit_value(&prob, &p, 0.5, 0.0, 10, -1.0, 1).is_err());
    }
}
