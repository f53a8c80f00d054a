//! Deep Wishart processes.
//!
//! The crate provides the generalized singular Wishart distribution (Bartlett
//! sampling with exact Jacobian-corrected densities), a small reverse-mode
//! autodiff tape over dense matrices, and doubly-stochastic inducing-point
//! variational inference for stacked Wishart layers.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::excessive_precision)]

pub mod autodiff;
pub mod error;
pub mod harness;
pub mod inference;
pub mod kernel;
pub mod matdist;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{LowerTrapezoid, Matrix, RngStream, SymMatrix};
