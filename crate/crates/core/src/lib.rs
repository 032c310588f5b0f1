//! Personalized age estimation with meta-learned classifier weights.
//!
//! A person's identity features drive a residual network that perturbs a
//! shared `K x D` classifier; age is decoded as the expectation of the
//! softmax over `K` age classes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod estimator;
pub mod losses;
pub mod mathcore;
pub mod metalearner;
pub mod metrics;
pub mod training;

pub use error::{Error, Result};
pub use metalearner::Dims;
