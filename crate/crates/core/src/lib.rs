// negated comparisons reject NaN along with out-of-range values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod loo;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod simulation;
pub mod stacking;

pub use error::{Error, Result};
