use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid action space: {0}")]
    InvalidActionSpace(String),

    #[error("invalid control problem: {0}")]
    InvalidProblem(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite feature value at node {row}, action {col}")]
    NonFiniteFeature { row: usize, col: usize },

    #[error("KL divergence is infinite: reference weight {weight:e} at node {row}, action {col}")]
    DegeneratePolicy { row: usize, col: usize, weight: f64 },

    #[error(
        "central differencing violates the cell Peclet bound at interior node {node} \
         (Pe = {peclet:.3} > 2); switch `convection` to upwind or refine the grid"
    )]
    PecletViolation { node: usize, peclet: f64 },

    #[error("singular tridiagonal system at row {row} (pivot {pivot:e}, mesh Peclet {peclet:.3})")]
    SingularSystem { row: usize, pivot: f64, peclet: f64 },

    #[error("regularization weight must be positive, got {0}")]
    InvalidTau(f64),

    #[error("operation requires a discrete action space")]
    NotDiscrete,

    #[error("no convergence after {iterations} iterations (last residual {last:e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    NoConvergence { iterations: usize, residuals: Vec<f64> },

    #[error("policy iteration cycles at iteration {iteration} without residual decrease (residual {residual:e})")]
    Cycling { iteration: usize, residual: f64 },

    #[error("non-finite flow state at step {step} (max |Z| = {max_abs:e})")]
    NonFiniteState { step: usize, max_abs: f64 },

    #[error("time step {dt} exceeds the stability bound {dt_max:.4}")]
    StepTooLarge { dt: f64, dt_max: f64 },

    #[error("record {index}: trajectory tau {expected} does not match supplied solution tau {found}")]
    TauMismatch { index: usize, expected: f64, found: f64 },

    #[error("path {path} did not exit after {steps} steps")]
    StepCapExceeded { path: usize, steps: u64 },

    #[error("adaptive quadrature did not reach relative tolerance {tol:e} on [{a}, {b}]")]
    Quadrature { a: f64, b: f64, tol: f64 },
}
