//! Simulation and invariant-density estimation for ergodic jump-diffusions.

// `!(x > 0.0)` is used on purpose so that NaN fails validation, and index
// loops follow the coordinate products they compute.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bandwidth;
pub mod cli;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod generator;
pub mod kernels;
pub mod model;
pub mod priors;
pub mod quadrature;
pub mod rng;

pub use error::{Error, Result};
