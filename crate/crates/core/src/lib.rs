//! Amortized hyperparameter inference for Gaussian processes with
//! structured kernels.

pub mod autodiff;
pub mod baselines;
pub mod checks;
pub mod container;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod gp;
pub mod grammar;
pub mod linalg;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod training;

pub use error::{Error, Result};
