//! Closed-form V-transforms and the special Gaussian integrals behind them.
//!
//! The V-transform of a nonlinearity maps a pre-activation covariance to the
//! post-nonlinearity second-moment matrix, `K -> E_{z~N(0,K)} phi(z)phi(z)^T`.

mod batchnorm;
mod closed;
mod erfprod;
mod orthant;

pub use batchnorm::{batchnorm_v_cross, batchnorm_v_single, BatchnormError};
pub use closed::{v_transform_closed, vexp_pair, vrelu_pair, vrelu_prime_pair, verf_pair, verf_prime_pair, ClosedKind, VtError};
pub use erfprod::{erf_product_expectation, sigmoid_product_expectation, sign_product_expectation};
pub use orthant::{orthant_probability, OrthantError, OrthantQuery};
