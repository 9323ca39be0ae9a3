//! Residual-guided hybrid simulation of buoyancy-driven cavity flow.
//!
//! A finite-volume Boussinesq solver and finite-volume-stencil neural
//! surrogates take turns advancing the same flow state: the surrogate rolls
//! out while the mass residual of its predictions stays under a threshold,
//! then the solver corrects the state and the surrogate is fine-tuned on the
//! fresh solver output.

// `!(a > b)` is used on purpose so that NaN takes the rejecting branch.
// Index loops mirror the stencil and matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod fv;
pub mod hybrid;
pub mod mesh;
pub mod metrics;
pub mod pcg;
pub mod snapshot;
pub mod solver;
pub mod surrogate;

pub use error::{Error, Result};
