//! Conditional Brownian-bridge diffusion over per-vertex fields on icosphere
//! meshes, for forecasting cortical thickness change from a baseline scan
//! and tabular covariates.

// Index loops read better in the numeric kernels; `!(a < b)` rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bridge;
pub mod cohort;
pub mod cosunet;
pub mod diffcore;
pub mod error;
pub mod evalx;
pub mod icosphere;
pub mod rng;
pub mod sampler;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
