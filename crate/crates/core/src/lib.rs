//! Newton-MR with inexact Hessian information.
//!
//! The crate is organised bottom-up:
//!
//! - [`linalg`]: dense symmetric matrices, the matrix-free [`linalg::LinearOperator`]
//!   abstraction, spectral decompositions, pseudo-inverse application and range projections.
//! - [`krylov`]: a minimum-residual, minimum-norm Krylov solver for symmetric and possibly
//!   singular or inconsistent systems, plus conjugate gradient.
//! - [`perturb`]: Hessian perturbations, measured spectral diagnostics and the predicted
//!   stability constants and rates.
//! - [`objectives`]: finite-sum test problems with gradients and (sub-sampled)
//!   Hessian-vector products.
//! - [`optim`]: Newton-MR and the baseline optimizers, with oracle-call accounting.
//! - [`bench`]: the configuration-driven experiment runner, performance profiles and plots.

pub mod bench;
pub mod error;
pub mod krylov;
pub mod linalg;
pub mod objectives;
pub mod optim;
pub mod perturb;

pub use error::{Error, Result};
pub use linalg::{EigenDecomposition, LinearOperator, SymMatrix, Vector};
