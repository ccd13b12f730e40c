//! Robust growth-optimal portfolios for ergodic diffusion markets.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod error;
pub mod model;
pub mod quadrature;
pub mod rank;
pub mod simulate;
pub mod variational;

pub use error::{Error, Result};
