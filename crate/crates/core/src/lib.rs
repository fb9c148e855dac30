//! HAC and fixed-b long-run variance estimation and heteroskedasticity and
//! autocorrelation robust inference when the error variance changes over time.

// `!(x > 0.0)` style guards are intentional: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod error;
pub mod estimators;
pub mod har;
pub mod harness;
pub mod kernels;
pub mod limitdist;
pub mod quad;

pub use error::{Error, Result};
