//! Finite-width instantiation, forward evaluation, and convergence studies.

mod exactsum;
mod forward;
pub mod rng;
mod study;

pub use exactsum::{exact_dot, exact_sum, ExactAcc};
pub use forward::{forward, instantiate, ForwardResult, Instantiation, RowMat, SimError};
pub use study::{convergence_study, empirical_kernel, empirical_moment, feature_kernel, EmpiricalReport, WidthRow};
