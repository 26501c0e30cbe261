//! Straight-line tensor programs and their infinite-width Gaussian process limits.
//!
//! This crate implements a small stack of cooperating pieces:
//!
//! * [`lang`] — the textual tensor-program language: AST, parser, printer,
//!   type checker, and the semantics-preserving `unwind` / `absorb_lincomb`
//!   transforms between the language dialects.
//! * [`nonlin`] — scalar nonlinearities as serializable expression trees,
//!   with a name registry that the parser and the kernel engine share.
//! * [`vtransform`] — closed-form V-transforms (ReLU, erf, exp), the
//!   erf/sigmoid product-expectation reduction, multivariate orthant
//!   probabilities, and the batchnorm integral reductions.
//! * [`engine`] — the symbolic interpreter that turns a well-typed program
//!   plus sampling data into the limit mean/covariance over G-vars and the
//!   GP kernel over program outputs.
//! * [`arch`] — builders that spell out standard architectures (MLP, RNN,
//!   GRU, CNN, batchnorm, layernorm, transformer) as programs, together with
//!   the specialized vectorized kernel algorithms for each.
//! * [`sim`] — finite-width instantiation and forward evaluation, empirical
//!   kernels, and width-convergence studies.

pub mod arch;
pub mod engine;
pub mod lang;
pub mod linalg;
pub mod nonlin;
pub mod quad;
pub mod sim;
pub mod special;
pub mod vtransform;

pub use engine::{compute_mu_sigma, output_kernel, EngineError, KernelTable, OutputKernel, SamplingSpec};
pub use lang::{parse_program, typecheck, Dialect, Program, TypedProgram};
pub use nonlin::{NonlinRegistry, NonlinSpec, ScalarExpr};
