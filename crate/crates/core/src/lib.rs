//! Uncertainty-aware Bayesian meta-learning for few-shot fault diagnosis.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the tensor formulas they implement.
#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod bayes;
pub mod calibration;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod filter;
pub mod perturb;
pub mod pipeline;
pub mod rng;
pub mod signal;
pub mod special;
pub mod ssl;
pub mod tasking;
pub mod uncertainty;

pub use error::{Error, Result};
pub use signal::Signal;
