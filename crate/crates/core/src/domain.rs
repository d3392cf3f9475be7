//! Grids, action spaces with their reference measure, and control-problem coefficients.
//!
//! Coefficients are supplied as scalar maps and tabulated once onto the interior
//! nodes × action nodes; the solvers only read the tables. The maps stay available
//! for off-grid evaluation (Hamiltonian samples, Monte Carlo).

use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature;

/// `x ↦ value`
pub type StateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
/// `(x, a) ↦ value`
pub type StateActionFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Default number of Gauss–Legendre nodes for interval action spaces.
pub const DEFAULT_N_QUAD: usize = 32;

pub fn constant(c: f64) -> StateFn {
    Arc::new(move |_| c)
}

/// Uniform mesh on `[left, right]` with `n_interior` interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub left: f64,
    pub right: f64,
    pub n_interior: usize,
    pub spacing: f64,
    pub nodes: Vec<f64>,
}

impl Grid {
    pub fn new(left: f64, right: f64, n_interior: usize) -> Result<Self> {
        if !left.is_finite() || !right.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite endpoints [{left}, {right}]")));
        }
        if left >= right {
            return Err(Error::InvalidGrid(format!("left {left} must be below right {right}")));
        }
        if n_interior == 0 {
            return Err(Error::InvalidGrid("n_interior must be at least 1".into()));
        }
        let spacing = (right - left) / (n_interior + 1) as f64;
        let mut nodes: Vec<f64> = (0..n_interior + 2).map(|i| left + i as f64 * spacing).collect();
        nodes[n_interior + 1] = right;
        Ok(Self { left, right, n_interior, spacing, nodes })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_interior + 2
    }

    pub fn interior(&self) -> &[f64] {
        &self.nodes[1..=self.n_interior]
    }

    /// Interior node `i` (0-based over interior nodes).
    pub fn x(&self, i: usize) -> f64 {
        self.nodes[i + 1]
    }

    pub fn contains(&self, x: f64) -> bool {
        x > self.left && x < self.right
    }
}

/// `build_grid`
pub fn build_grid(left: f64, right: f64, n_interior: usize) -> Result<Grid> {
    Grid::new(left, right, n_interior)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    Discrete,
    Interval { alpha: f64, beta: f64 },
}

/// Action nodes with reference-measure weights. `mu_weights` always sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    pub kind: ActionKind,
    pub actions: Vec<f64>,
    pub mu_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpec {
    Discrete(Vec<f64>),
    Interval { alpha: f64, beta: f64, n_quad: usize },
}

impl ActionSpace {
    pub fn discrete(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidActionSpace("empty action list".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidActionSpace("non-finite action value".into()));
        }
        let n = values.len();
        Ok(Self {
            kind: ActionKind::Discrete,
            actions: values.to_vec(),
            mu_weights: vec![1.0 / n as f64; n],
        })
    }

    /// Gauss–Legendre nodes on `[alpha, beta]`, weights normalized to the uniform density.
    pub fn interval(alpha: f64, beta: f64, n_quad: usize) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() || alpha >= beta {
            return Err(Error::InvalidActionSpace(format!("need alpha < beta, got [{alpha}, {beta}]")));
        }
        if n_quad < 2 {
            return Err(Error::InvalidActionSpace("n_quad must be at least 2".into()));
        }
        let (t, w) = quadrature::gauss_legendre(n_quad);
        let (actions, w) = quadrature::map_rule(&t, &w, alpha, beta);
        let mut mu_weights: Vec<f64> = w.iter().map(|w| w / (beta - alpha)).collect();
        // remove the last ulps of drift so the measure is a probability to 1e-15
        let total: f64 = mu_weights.iter().sum();
        mu_weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { kind: ActionKind::Interval { alpha, beta }, actions, mu_weights })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, ActionKind::Discrete)
    }

    /// Smallest interval containing every action.
    pub fn range(&self) -> (f64, f64) {
        match self.kind {
            ActionKind::Interval { alpha, beta } => (alpha, beta),
            ActionKind::Discrete => {
                let lo = self.actions.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = self.actions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        }
    }
}

/// `make_action_space`
pub fn make_action_space(spec: &ActionSpec) -> Result<ActionSpace> {
    match spec {
        ActionSpec::Discrete(values) => ActionSpace::discrete(values),
        ActionSpec::Interval { alpha, beta, n_quad } => ActionSpace::interval(*alpha, *beta, *n_quad),
    }
}

/// How the first-order term `b·v′` is discretized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convection {
    #[default]
    Central,
    Upwind,
}

/// Coefficients that are affine (drift, discount) or quadratic (cost) in the action.
#[derive(Clone)]
pub struct LqProblemSpec {
    pub b_bar: StateFn,
    pub b_hat: StateFn,
    pub c_bar: StateFn,
    pub c_hat: StateFn,
    pub f_bar: StateFn,
    pub f_tilde: StateFn,
    pub f_hat: StateFn,
    pub alpha: f64,
    pub beta: f64,
}

/// Pointwise LQ coefficients at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqCoefficients {
    pub b_bar: f64,
    pub b_hat: f64,
    pub c_bar: f64,
    pub c_hat: f64,
    pub f_bar: f64,
    pub f_tilde: f64,
    pub f_hat: f64,
}

impl LqProblemSpec {
    /// All maps zero except `f_hat ≡ 1`, on `[alpha, beta]`.
    pub fn pure_quadratic(alpha: f64, beta: f64) -> Self {
        Self {
            b_bar: constant(0.0),
            b_hat: constant(0.0),
            c_bar: constant(0.0),
            c_hat: constant(0.0),
            f_bar: constant(0.0),
            f_tilde: constant(0.0),
            f_hat: constant(1.0),
            alpha,
            beta,
        }
    }

    pub fn at(&self, x: f64) -> LqCoefficients {
        LqCoefficients {
            b_bar: (self.b_bar)(x),
            b_hat: (self.b_hat)(x),
            c_bar: (self.c_bar)(x),
            c_hat: (self.c_hat)(x),
            f_bar: (self.f_bar)(x),
            f_tilde: (self.f_tilde)(x),
            f_hat: (self.f_hat)(x),
        }
    }
}

impl fmt::Debug for LqProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LqProblemSpec").field("alpha", &self.alpha).field("beta", &self.beta).finish()
    }
}

/// Coefficients tabulated on interior nodes × action nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub drift: Array2<f64>,
    pub discount: Array2<f64>,
    pub cost: Array2<f64>,
    /// `σ(x)²/2` on interior nodes.
    pub diffusion: Vec<f64>,
    pub g_left: f64,
    pub g_right: f64,
}

/// Exit-time control problem on a 1D interval.
#[derive(Clone)]
pub struct ControlProblem {
    pub grid: Grid,
    pub actions: ActionSpace,
    pub drift: StateActionFn,
    pub discount: StateActionFn,
    pub cost: StateActionFn,
    pub sigma: StateFn,
    pub exit_cost: StateFn,
    pub lq: Option<LqProblemSpec>,
    pub convection: Convection,
    pub table: CoefficientTable,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("grid", &self.grid)
            .field("actions", &self.actions)
            .field("lq", &self.lq.is_some())
            .field("convection", &self.convection)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        grid: Grid,
        actions: ActionSpace,
        drift: StateActionFn,
        discount: StateActionFn,
        cost: StateActionFn,
        sigma: StateFn,
        exit_cost: StateFn,
    ) -> Result<Self> {
        let n = grid.n_interior;
        let m = actions.len();
        let mut b = Array2::zeros((n, m));
        let mut c = Array2::zeros((n, m));
        let mut f = Array2::zeros((n, m));
        let mut diffusion = Vec::with_capacity(n);
        for i in 0..n {
            let x = grid.x(i);
            for (k, &a) in actions.actions.iter().enumerate() {
                b[[i, k]] = drift(x, a);
                c[[i, k]] = discount(x, a);
                f[[i, k]] = cost(x, a);
                if !(b[[i, k]].is_finite() && c[[i, k]].is_finite() && f[[i, k]].is_finite()) {
                    return Err(Error::InvalidProblem(format!("non-finite coefficient at x={x}, a={a}")));
                }
                if c[[i, k]] < 0.0 {
                    return Err(Error::InvalidProblem(format!(
                        "negative discount {} at x={x}, a={a}",
                        c[[i, k]]
                    )));
                }
            }
            let s = sigma(x);
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidProblem(format!("diffusion must be positive, sigma({x}) = {s}")));
            }
            diffusion.push(0.5 * s * s);
        }
        for x in [grid.left, grid.right] {
            let s = sigma(x);
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidProblem(format!("diffusion must be positive, sigma({x}) = {s}")));
            }
        }
        let g_left = exit_cost(grid.left);
        let g_right = exit_cost(grid.right);
        if !g_left.is_finite() || !g_right.is_finite() {
            return Err(Error::InvalidProblem("non-finite exit cost".into()));
        }
        Ok(Self {
            grid,
            actions,
            drift,
            discount,
            cost,
            sigma,
            exit_cost,
            lq: None,
            convection: Convection::Central,
            table: CoefficientTable { drift: b, discount: c, cost: f, diffusion, g_left, g_right },
        })
    }

    pub fn with_convection(mut self, convection: Convection) -> Self {
        self.convection = convection;
        self
    }

    /// Same coefficients on a different action discretization (e.g. a finer quadrature).
    pub fn with_actions(&self, actions: ActionSpace) -> Result<Self> {
        let mut p = Self::new(
            self.grid.clone(),
            actions,
            self.drift.clone(),
            self.discount.clone(),
            self.cost.clone(),
            self.sigma.clone(),
            self.exit_cost.clone(),
        )?;
        p.lq = self.lq.clone();
        p.convection = self.convection;
        Ok(p)
    }

    pub fn n_interior(&self) -> usize {
        self.grid.n_interior
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    /// `b(x,a)·p − c(x,a)·u + f(x,a)` at an arbitrary state.
    pub fn integrand(&self, x: f64, a: f64, u: f64, p: f64) -> f64 {
        (self.drift)(x, a) * p - (self.discount)(x, a) * u + (self.cost)(x, a)
    }

    /// `sup |f|` over the tabulated nodes.
    pub fn cost_sup(&self) -> f64 {
        self.table.cost.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Builds a problem from LQ-structured coefficients.
pub fn make_lq_problem(
    spec: LqProblemSpec,
    grid: Grid,
    actions: ActionSpace,
    sigma: StateFn,
    g: StateFn,
) -> Result<ControlProblem> {
    let (lo, hi) = actions.range();
    if !(spec.alpha < spec.beta) {
        return Err(Error::InvalidProblem(format!("LQ range needs alpha < beta, got [{}, {}]", spec.alpha, spec.beta)));
    }
    if lo < spec.alpha - 1e-12 || hi > spec.beta + 1e-12 {
        return Err(Error::InvalidProblem(format!(
            "actions [{lo}, {hi}] leave the LQ range [{}, {}]",
            spec.alpha, spec.beta
        )));
    }
    for &x in &grid.nodes {
        let q = spec.at(x);
        if !(q.f_hat > 0.0) {
            return Err(Error::InvalidProblem(format!("f_hat must be positive, f_hat({x}) = {}", q.f_hat)));
        }
        for a in [spec.alpha, spec.beta] {
            let c = q.c_bar + q.c_hat * a;
            if c < 0.0 {
                return Err(Error::InvalidProblem(format!("discount c_bar + c_hat*a = {c} < 0 at x={x}, a={a}")));
            }
        }
    }
    let s = spec.clone();
    let drift: StateActionFn = Arc::new(move |x, a| (s.b_bar)(x) + (s.b_hat)(x) * a);
    let s = spec.clone();
    let discount: StateActionFn = Arc::new(move |x, a| (s.c_bar)(x) + (s.c_hat)(x) * a);
    let s = spec.clone();
    let cost: StateActionFn = Arc::new(move |x, a| (s.f_bar)(x) + (s.f_tilde)(x) * a + (s.f_hat)(x) * a * a);
    let mut problem = ControlProblem::new(grid, actions, drift, discount, cost, sigma, g)?;
    problem.lq = Some(spec);
    Ok(problem)
}

/// Polynomial in `x` with ascending coefficients; a single entry is a constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Polynomial {
    Constant(f64),
    Coefficients(Vec<f64>),
}

impl Polynomial {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Polynomial::Constant(c) => *c,
            Polynomial::Coefficients(cs) => cs.iter().rev().fold(0.0, |acc, c| acc * x + c),
        }
    }

    pub fn to_fn(&self) -> StateFn {
        let p = self.clone();
        Arc::new(move |x| p.eval(x))
    }
}

impl Default for Polynomial {
    fn default() -> Self {
        Polynomial::Constant(0.0)
    }
}

/// Reference LQ benchmark: `(0,1)`, `σ ≡ √2`, `b = a`, `f = 1 + a²`, `c ≡ 0`, `g ≡ 0`.
pub fn lq_benchmark(n_interior: usize, actions: ActionSpace) -> Result<ControlProblem> {
    let grid = Grid::new(0.0, 1.0, n_interior)?;
    let (lo, hi) = actions.range();
    let spec = LqProblemSpec {
        b_bar: constant(0.0),
        b_hat: constant(1.0),
        c_bar: constant(0.0),
        c_hat: constant(0.0),
        f_bar: constant(1.0),
        f_tilde: constant(0.0),
        f_hat: constant(1.0),
        alpha: lo.min(-1.0),
        beta: hi.max(1.0),
    };
    make_lq_problem(spec, grid, actions, constant(std::f64::consts::SQRT_2), constant(0.0))
}
