//! Linear on-policy Bellman equation `½σ²v″ + b̄v′ − c̄v + f̄ + τ·KL = 0` with Dirichlet data.
//!
//! One discrete operator serves the solve, the residual and the performance-difference
//! check. The operator for a policy is the policy average of the per-action stencils, so
//! it is linear in the policy weights in both convection modes.

use ndarray::Array2;

use crate::domain::{ControlProblem, Convection, Grid};
use crate::error::{Error, Result};
use crate::policy::{kl_between, kl_to_reference, Policy};
use crate::tridiag::Tridiagonal;

/// Nodal values on all grid nodes plus the central-difference gradient on interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub v: Vec<f64>,
    pub dv: Vec<f64>,
    pub tau: f64,
}

impl ValueField {
    /// Values on interior nodes.
    pub fn interior(&self) -> &[f64] {
        &self.v[1..self.v.len() - 1]
    }

    pub fn sup_norm(&self) -> f64 {
        self.v.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Gradient on every node: interior central differences, one-sided second order at the ends.
    pub fn full_gradient(&self, grid: &Grid) -> Vec<f64> {
        let h = grid.spacing;
        let n = self.v.len();
        let mut out = Vec::with_capacity(n);
        if n >= 3 {
            out.push((-3.0 * self.v[0] + 4.0 * self.v[1] - self.v[2]) / (2.0 * h));
        } else {
            out.push((self.v[1] - self.v[0]) / h);
        }
        out.extend_from_slice(&self.dv);
        if n >= 3 {
            out.push((3.0 * self.v[n - 1] - 4.0 * self.v[n - 2] + self.v[n - 3]) / (2.0 * h));
        } else {
            out.push((self.v[n - 1] - self.v[n - 2]) / h);
        }
        out
    }
}

/// Policy-averaged drift, discount, cost and `KL(π|μ)` on interior nodes.
///
/// `b_pos`/`b_neg` are the averages of the positive and negative parts of the drift,
/// which the upwind stencil needs; `b_bar = b_pos + b_neg`.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedCoefficients {
    pub b_bar: Vec<f64>,
    pub b_pos: Vec<f64>,
    pub b_neg: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub f_bar: Vec<f64>,
    pub kl: Vec<f64>,
}

impl AveragedCoefficients {
    /// Coefficients of a deterministic selection of (possibly off-node) actions.
    pub fn from_actions(problem: &ControlProblem, actions: &[f64]) -> Self {
        let n = problem.n_interior();
        let mut out = Self::zeros(n);
        for (i, &a) in actions.iter().enumerate() {
            let x = problem.grid.x(i);
            let b = (problem.drift)(x, a);
            out.b_bar[i] = b;
            out.b_pos[i] = b.max(0.0);
            out.b_neg[i] = b.min(0.0);
            out.c_bar[i] = (problem.discount)(x, a);
            out.f_bar[i] = (problem.cost)(x, a);
        }
        out
    }

    fn zeros(n: usize) -> Self {
        Self {
            b_bar: vec![0.0; n],
            b_pos: vec![0.0; n],
            b_neg: vec![0.0; n],
            c_bar: vec![0.0; n],
            f_bar: vec![0.0; n],
            kl: vec![0.0; n],
        }
    }
}

/// π-integrated coefficients.
pub fn average_coefficients(problem: &ControlProblem, p: &Policy) -> Result<AveragedCoefficients> {
    check_shape(problem, p)?;
    let t = &problem.table;
    let n = problem.n_interior();
    let mut out = AveragedCoefficients::zeros(n);
    for i in 0..n {
        for (k, &w) in p.weights.row(i).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let b = t.drift[[i, k]];
            out.b_bar[i] += w * b;
            out.b_pos[i] += w * b.max(0.0);
            out.b_neg[i] += w * b.min(0.0);
            out.c_bar[i] += w * t.discount[[i, k]];
            out.f_bar[i] += w * t.cost[[i, k]];
        }
    }
    out.kl = kl_to_reference(p);
    Ok(out)
}

fn check_shape(problem: &ControlProblem, p: &Policy) -> Result<()> {
    let want = (problem.n_interior(), problem.n_actions());
    if p.weights.dim() != want {
        return Err(Error::ShapeMismatch(format!("policy {:?}, problem {:?}", p.weights.dim(), want)));
    }
    Ok(())
}

/// Mesh Péclet number `|b̄|·h / (σ²/2)` per interior node.
pub fn peclet_numbers(problem: &ControlProblem, coeffs: &AveragedCoefficients) -> Vec<f64> {
    let h = problem.grid.spacing;
    coeffs.b_bar.iter().zip(&problem.table.diffusion).map(|(b, d)| b.abs() * h / d).collect()
}

/// Interior-node operator; boundary couplings stay in `lower[0]` and `upper[n-1]`.
pub fn assemble(problem: &ControlProblem, coeffs: &AveragedCoefficients) -> Result<Tridiagonal> {
    let n = problem.n_interior();
    let h = problem.grid.spacing;
    let h2 = h * h;
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    for i in 0..n {
        let d = problem.table.diffusion[i];
        match problem.convection {
            Convection::Central => {
                let pe = coeffs.b_bar[i].abs() * h / d;
                if pe > 2.0 {
                    return Err(Error::PecletViolation { node: i, peclet: pe });
                }
                lower[i] = d / h2 - coeffs.b_bar[i] / (2.0 * h);
                upper[i] = d / h2 + coeffs.b_bar[i] / (2.0 * h);
                diag[i] = -2.0 * d / h2 - coeffs.c_bar[i];
            }
            Convection::Upwind => {
                lower[i] = d / h2 - coeffs.b_neg[i] / h;
                upper[i] = d / h2 + coeffs.b_pos[i] / h;
                diag[i] = -2.0 * d / h2 - (coeffs.b_pos[i] - coeffs.b_neg[i]) / h - coeffs.c_bar[i];
            }
        }
    }
    Ok(Tridiagonal { lower, diag, upper })
}

/// Solves `A v + forcing = 0` on interior nodes with `v = g` at the ends.
pub fn solve_linear(
    problem: &ControlProblem,
    coeffs: &AveragedCoefficients,
    forcing: &[f64],
    g_left: f64,
    g_right: f64,
    tau: f64,
) -> Result<ValueField> {
    let n = problem.n_interior();
    let op = assemble(problem, coeffs)?;
    let mut rhs: Vec<f64> = forcing.iter().map(|f| -f).collect();
    rhs[0] -= op.lower[0] * g_left;
    rhs[n - 1] -= op.upper[n - 1] * g_right;
    let interior = op.solve(&rhs).map_err(|z| Error::SingularSystem {
        row: z.row,
        pivot: z.pivot,
        peclet: coeffs.b_bar[z.row].abs() * problem.grid.spacing / problem.table.diffusion[z.row],
    })?;
    let mut v = Vec::with_capacity(n + 2);
    v.push(g_left);
    v.extend(interior);
    v.push(g_right);
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::SingularSystem { row: i.saturating_sub(1), pivot: f64::NAN, peclet: f64::NAN });
    }
    let dv = central_gradient(&v, problem.grid.spacing);
    Ok(ValueField { v, dv, tau })
}

/// Central differences on interior nodes, using the boundary values.
pub fn central_gradient(v: &[f64], h: f64) -> Vec<f64> {
    v.windows(3).map(|w| (w[2] - w[0]) / (2.0 * h)).collect()
}

/// `A v` on interior nodes for a full nodal vector (boundary couplings included).
pub fn apply_operator(problem: &ControlProblem, coeffs: &AveragedCoefficients, v: &[f64]) -> Result<Vec<f64>> {
    let op = assemble(problem, coeffs)?;
    let n = problem.n_interior();
    Ok((0..n).map(|i| op.lower[i] * v[i] + op.diag[i] * v[i + 1] + op.upper[i] * v[i + 2]).collect())
}

/// Value of a fixed Gibbs (or deterministic) policy with KL weight `tau`.
pub fn solve_on_policy_bellman(problem: &ControlProblem, p: &Policy, tau: f64) -> Result<ValueField> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be nonnegative, got {tau}")));
    }
    let coeffs = average_coefficients(problem, p)?;
    let forcing = forcing(&coeffs, tau);
    solve_linear(problem, &coeffs, &forcing, problem.table.g_left, problem.table.g_right, tau)
}

pub(crate) fn forcing(coeffs: &AveragedCoefficients, tau: f64) -> Vec<f64> {
    if tau == 0.0 {
        return coeffs.f_bar.clone();
    }
    coeffs.f_bar.iter().zip(&coeffs.kl).map(|(f, k)| f + tau * k).collect()
}

/// `max_i |A v + f̄ + τ·KL|` over interior nodes.
pub fn pde_residual(problem: &ControlProblem, p: &Policy, tau: f64, v: &ValueField) -> Result<f64> {
    let coeffs = average_coefficients(problem, p)?;
    let av = apply_operator(problem, &coeffs, &v.v)?;
    let f = forcing(&coeffs, tau);
    Ok(av.iter().zip(&f).fold(0.0f64, |m, (a, f)| m.max((a + f).abs())))
}

/// Per-action operator `ℒ^{a_k} v` on interior nodes, same stencil as [`assemble`].
pub fn per_action_generator(problem: &ControlProblem, v: &[f64]) -> Array2<f64> {
    let n = problem.n_interior();
    let m = problem.n_actions();
    let h = problem.grid.spacing;
    let t = &problem.table;
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        let (vl, vc, vr) = (v[i], v[i + 1], v[i + 2]);
        let second = t.diffusion[i] * (vr - 2.0 * vc + vl) / (h * h);
        for k in 0..m {
            let b = t.drift[[i, k]];
            let first = match problem.convection {
                Convection::Central => b * (vr - vl) / (2.0 * h),
                Convection::Upwind => b.max(0.0) * (vr - vc) / h + b.min(0.0) * (vc - vl) / h,
            };
            out[[i, k]] = second + first - t.discount[[i, k]] * vc;
        }
    }
    out
}

/// Checks the performance-difference identity on the discrete operator.
///
/// Solves `∫ℒ^a w dp + h = 0`, `w = 0` on the boundary, with
/// `h = Σ_k (ℒ^{a_k} v_q + f + τ ln dq/dμ)(p − q) + τ KL(p|q)` and returns
/// `max_i |w − (v_p − v_q)|`.
pub fn performance_difference_check(problem: &ControlProblem, p: &Policy, q: &Policy, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::InvalidTau(tau));
    }
    let vp = solve_on_policy_bellman(problem, p, tau)?;
    let vq = solve_on_policy_bellman(problem, q, tau)?;
    let gen = per_action_generator(problem, &vq.v);
    let kl_pq = kl_between(p, q)?;
    let n = problem.n_interior();
    let mut h = vec![0.0; n];
    for i in 0..n {
        let mut acc = 0.0;
        for k in 0..problem.n_actions() {
            let dw = p.weights[[i, k]] - q.weights[[i, k]];
            if dw == 0.0 {
                continue;
            }
            acc += (gen[[i, k]] + problem.table.cost[[i, k]] + tau * q.log_density[[i, k]]) * dw;
        }
        h[i] = acc + tau * kl_pq[i];
    }
    let coeffs = average_coefficients(problem, p)?;
    let w = solve_linear(problem, &coeffs, &h, 0.0, 0.0, tau)?;
    Ok((1..=n).fold(0.0f64, |m, i| m.max((w.v[i] - (vp.v[i] - vq.v[i])).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{constant, lq_benchmark, ActionSpace, StateActionFn};
    use crate::policy::{gibbs_policy, FeatureField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn manufactured(n: usize, f: StateActionFn) -> ControlProblem {
        let grid = Grid::new(0.0, 1.0, n).unwrap();
        let zero: StateActionFn = Arc::new(|_, _| 0.0);
        ControlProblem::new(
            grid,
            ActionSpace::discrete(&[0.0]).unwrap(),
            zero.clone(),
            zero,
            f,
            constant(std::f64::consts::SQRT_2),
            constant(0.0),
        )
        .unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let prob = manufactured(3, Arc::new(|_, _| 2.0));
        let p = Policy::uniform(3, &prob.actions);
        let v = solve_on_policy_bellman(&prob, &p, 0.0).unwrap();
        assert!((v.v[2] - 0.25).abs() < 1e-15);
        assert!((v.v[1] - 0.1875).abs() < 1e-15);
        assert_eq!(v.v[0], 0.0);
        assert_eq!(v.v[4], 0.0);
        assert!(pde_residual(&prob, &p, 0.0, &v).unwrap() <= 1e-10 * 3.0);
    }

    #[test]
    fn zero_data_gives_zero() {
        let prob = manufactured(9, Arc::new(|_, _| 0.0));
        let v = solve_on_policy_bellman(&prob, &Policy::uniform(9, &prob.actions), 0.0).unwrap();
        assert!(v.v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn residual_examples() {
        let prob = manufactured(7, Arc::new(|_, _| 1.0));
        let p = Policy::uniform(7, &prob.actions);
        let zero = ValueField { v: vec![0.0; 9], dv: vec![0.0; 7], tau: 0.0 };
        assert!((pde_residual(&prob, &p, 0.0, &zero).unwrap() - 1.0).abs() < 1e-15);

        let mut v = solve_on_policy_bellman(&prob, &p, 0.0).unwrap();
        let eps = 1e-3;
        v.v[4] += eps;
        let h = prob.grid.spacing;
        let r = pde_residual(&prob, &p, 0.0, &v).unwrap();
        assert!(r >= eps * 2.0 / (h * h) * 0.99, "r = {r}");
    }

    #[test]
    fn second_order_mesh_convergence() {
        let pi = std::f64::consts::PI;
        let mut errs = Vec::new();
        for n in [49, 99, 199] {
            let prob = manufactured(n, Arc::new(move |x, _| pi * pi * (pi * x).sin()));
            let v = solve_on_policy_bellman(&prob, &Policy::uniform(n, &prob.actions), 0.0).unwrap();
            let e = prob.grid.nodes.iter().zip(&v.v).fold(0.0f64, |m, (x, v)| m.max((v - (pi * x).sin()).abs()));
            errs.push(e);
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn comparison_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let actions = ActionSpace::discrete(&[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let prob = lq_benchmark(39, actions).unwrap();
        for _ in 0..10 {
            let z = Array2::from_shape_fn((39, 5), |_| rng.random_range(-5.0..5.0));
            let p = gibbs_policy(&FeatureField::new(z), &prob.actions).unwrap();
            let v = solve_on_policy_bellman(&prob, &p, 0.3).unwrap();
            assert!(v.v.iter().all(|x| *x >= -1e-10));
        }
    }

    #[test]
    fn averaging_examples() {
        let actions = ActionSpace::discrete(&[-1.0, 0.0, 1.0]).unwrap();
        let prob = lq_benchmark(5, actions.clone()).unwrap();
        let c = average_coefficients(&prob, &Policy::uniform(5, &actions)).unwrap();
        assert!(c.b_bar.iter().all(|b| b.abs() < 1e-16));
        let z = Array2::from_shape_fn((5, 3), |(_, k)| if k == 0 { 0.0 } else { -800.0 });
        let c = average_coefficients(&prob, &gibbs_policy(&FeatureField::new(z), &actions).unwrap()).unwrap();
        assert!(c.b_bar.iter().all(|b| (b + 1.0).abs() < 1e-12));

        let two = ActionSpace::discrete(&[0.0, 2.0]).unwrap();
        let prob = lq_benchmark(3, two.clone()).unwrap();
        let z = Array2::from_shape_fn((3, 2), |(_, k)| if k == 0 { 0.0 } else { 3f64.ln() });
        let c = average_coefficients(&prob, &gibbs_policy(&FeatureField::new(z), &two).unwrap()).unwrap();
        // f = 1 + a² takes values 1 and 5 → 0.25·1 + 0.75·5
        assert!(c.f_bar.iter().all(|f| (f - 4.0).abs() < 1e-14));
    }

    #[test]
    fn performance_difference_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for prob in [
            lq_benchmark(29, ActionSpace::interval(-1.0, 1.0, 12).unwrap()).unwrap(),
            lq_benchmark(29, ActionSpace::discrete(&[-1.0, 0.0, 1.0]).unwrap())
                .unwrap()
                .with_convection(Convection::Upwind),
        ] {
            let m = prob.n_actions();
            let p = gibbs_policy(&FeatureField::new(Array2::from_shape_fn((29, m), |_| rng.random_range(-3.0..3.0))), &prob.actions).unwrap();
            let q = gibbs_policy(&FeatureField::new(Array2::from_shape_fn((29, m), |_| rng.random_range(-3.0..3.0))), &prob.actions).unwrap();
            let scale = 1.0 + solve_on_policy_bellman(&prob, &p, 0.4).unwrap().sup_norm();
            assert!(performance_difference_check(&prob, &p, &q, 0.4).unwrap() <= 1e-8 * scale);
            assert!(performance_difference_check(&prob, &q, &p, 0.4).unwrap() <= 1e-8 * scale);
            assert!(performance_difference_check(&prob, &p, &p, 0.4).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn peclet_violation_is_reported() {
        let grid = Grid::new(0.0, 1.0, 4).unwrap();
        let drift: StateActionFn = Arc::new(|_, _| 50.0);
        let zero: StateActionFn = Arc::new(|_, _| 0.0);
        let one: StateActionFn = Arc::new(|_, _| 1.0);
        let prob = ControlProblem::new(grid, ActionSpace::discrete(&[0.0]).unwrap(), drift, zero, one, constant(1.0), constant(0.0)).unwrap();
        let p = Policy::uniform(4, &prob.actions);
        assert!(matches!(solve_on_policy_bellman(&prob, &p, 0.0), Err(Error::PecletViolation { .. })));
        let up = prob.with_convection(Convection::Upwind);
        let v = solve_on_policy_bellman(&up, &p, 0.0).unwrap();
        assert!(v.v.iter().all(|x| x.is_finite() && *x >= 0.0));
    }
}
