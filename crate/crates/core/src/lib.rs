//! Policy mirror descent with entropy annealing for exit-time control of 1D diffusions.

pub mod bounds;
pub mod cli;
pub mod config;
pub mod domain;
pub mod elliptic;
pub mod error;
pub mod flow;
pub mod hamiltonian;
pub mod hjb;
pub mod io;
pub mod montecarlo;
pub mod policy;
pub mod quadrature;
pub mod special;
pub mod tridiag;

pub use error::{Error, Result};
