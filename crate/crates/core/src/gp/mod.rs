//! Exact Gaussian-process math for structured kernels.

pub mod diff;
pub mod kernel;
pub mod posterior;

pub use kernel::{kernel_diagonal, kernel_matrix, kernel_value};
pub use posterior::{gaussian_nll, log_marginal_likelihood, GpPosterior, Metrics, Prediction};
