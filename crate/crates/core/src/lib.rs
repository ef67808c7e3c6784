//! First-order QP toolkit built around the generalized fast dual gradient
//! method: the negative dual function is majorized by a quadratic with a
//! matrix-valued curvature `L ⪰ C P Cᵀ` instead of a scalar Lipschitz
//! constant, and `L` is chosen offline to minimize the eigenvalue ratio of
//! the preconditioned dual curvature.
//!
//! Layout:
//! - [`numkern`]: dense symmetric kernels (eigen, Cholesky, KKT, range bases)
//! - [`problem`]: `f(x) + h(x) + g(Bx)` subject to `Ax = b`, validation, files
//! - [`curvature`]: dual curvature matrices `C P Cᵀ` and scalar baselines
//! - [`metric`]: structured metric selection through small SDPs
//! - [`prox`]: generalized prox operators and the metric Moreau identity
//! - [`solver`]: fast gradient / fast dual gradient / ADMM engines
//! - [`qp`]: dense interior point reference solver with active-set polish
//! - [`mpc`]: horizon condensation, the AFTI-16 model, closed-loop runs
//! - [`bench`]: the AFTI-16 iteration-count benchmark

pub mod bench;
pub mod curvature;
pub mod error;
pub mod metric;
pub mod mpc;
pub mod numkern;
pub mod problem;
pub mod prox;
pub mod qp;
pub mod solver;

pub use error::{Error, Result};
