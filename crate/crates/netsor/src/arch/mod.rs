//! Standard architectures: program builders and the specialized vectorized
//! kernel algorithms, cross-checkable against the generic engine.

mod batchnorm;
mod cnn;
mod gru;
mod layernorm;
mod mlp;
mod rnn;
mod transformer;

pub use batchnorm::batchnorm_kernel;
pub use cnn::{cnn_kernel, cnn_kernel_scalar, CnnGeometry};
pub use gru::{gru_kernel, gru_zeta};
pub use layernorm::{layernorm_correction, layernorm_kernel};
pub use mlp::mlp_kernel;
pub use rnn::rnn_kernel;
pub use transformer::transformer_kernel;

use crate::engine::{EngineOptions, SamplingSpec};
use crate::lang::{Program, TypedProgram};
use crate::vtransform::{verf_pair, vexp_pair, vrelu_pair};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp,
    Rnn,
    Gru,
    Cnn,
    BatchnormNet,
    LayernormNet,
    Transformer,
}

/// Input data for an architecture.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputPayload {
    /// One vector per network input (mlp, layernorm-net).
    Vectors(Vec<Vec<f64>>),
    /// Batches of vectors (batchnorm-net).
    Batches(Vec<Vec<Vec<f64>>>),
    /// Token sequences (rnn, gru, transformer); lengths may differ.
    Sequences(Vec<Vec<Vec<f64>>>),
    /// Images on an explicit pixel grid plus layer geometry (cnn). Image
    /// `a`, pixel index `p` (into `geometry.pos[0]`) holds an m-channel
    /// vector.
    Images { images: Vec<Vec<Vec<f64>>>, geometry: CnnGeometry },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    /// Number of layers L (time steps come from the payload for recurrent
    /// kinds).
    pub depth: usize,
    /// Nonlinearity name in the builtin registry.
    pub nonlin: String,
    pub sigma_w: f64,
    #[serde(default = "default_one")]
    pub sigma_u: f64,
    #[serde(default)]
    pub sigma_b: f64,
    #[serde(default = "default_one")]
    pub sigma_v: f64,
    pub payload: InputPayload,
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchError {
    BadPayload(String),
    BadConfig(String),
    Engine(String),
}

impl fmt::Display for ArchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchError::BadPayload(m) => write!(f, "malformed payload: {m}"),
            ArchError::BadConfig(m) => write!(f, "invalid configuration: {m}"),
            ArchError::Engine(m) => write!(f, "kernel computation failed: {m}"),
        }
    }
}

impl std::error::Error for ArchError {}

/// A built architecture: the typed program together with its sampling data
/// and readout variances.
#[derive(Debug, Clone)]
pub struct BuiltProgram {
    pub typed: TypedProgram,
    pub sampling: SamplingSpec,
    pub sigma_v: BTreeMap<String, f64>,
    /// One label per output, mirroring the specialized kernels' ordering.
    pub output_labels: Vec<String>,
}

/// Spell out the architecture as a straight-line program with for-loops
/// unrolled and A-vars shared exactly as the architecture ties weights.
pub fn build_program(cfg: &ArchConfig) -> Result<Program, ArchError> {
    Ok(build(cfg)?.typed.program.clone())
}

/// Build the program together with its sampling spec.
pub fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    validate_common(cfg)?;
    match cfg.kind {
        ArchKind::Mlp => mlp::build(cfg),
        ArchKind::Rnn => rnn::build(cfg),
        ArchKind::Gru => gru::build(cfg),
        ArchKind::Cnn => cnn::build(cfg),
        ArchKind::BatchnormNet => batchnorm::build(cfg),
        ArchKind::LayernormNet => layernorm::build(cfg),
        ArchKind::Transformer => transformer::build(cfg),
    }
}

/// The specialized kernel for the configured architecture.
pub fn arch_kernel(
    cfg: &ArchConfig,
    opts: &EngineOptions,
) -> Result<crate::engine::OutputKernel, ArchError> {
    validate_common(cfg)?;
    match cfg.kind {
        ArchKind::Mlp => mlp_kernel(cfg, opts),
        ArchKind::Rnn => rnn_kernel(cfg, opts),
        ArchKind::Gru => gru_kernel(cfg, opts),
        ArchKind::Cnn => cnn_kernel(cfg, opts),
        ArchKind::BatchnormNet => batchnorm_kernel(cfg),
        ArchKind::LayernormNet => layernorm_kernel(cfg),
        ArchKind::Transformer => transformer_kernel(cfg),
    }
}

fn validate_common(cfg: &ArchConfig) -> Result<(), ArchError> {
    if cfg.depth == 0 {
        return Err(ArchError::BadConfig("depth must be >= 1".into()));
    }
    for v in [cfg.sigma_w, cfg.sigma_u, cfg.sigma_b, cfg.sigma_v] {
        if !v.is_finite() || v < 0.0 {
            return Err(ArchError::BadConfig("variances must be finite and nonnegative".into()));
        }
    }
    Ok(())
}

/// Closed-form E[phi(z1) phi(z2)] for the named nonlinearity, over a
/// zero-mean pair with the given moments. None when no closed form exists.
pub(crate) fn vpair(nonlin: &str, kxx: f64, kxy: f64, kyy: f64) -> Option<f64> {
    match nonlin {
        "relu" => vrelu_pair(kxx, kxy, kyy).ok(),
        "erf" => verf_pair(kxx, kxy, kyy).ok(),
        "exp" => vexp_pair(kxx, kxy, kyy, 1.0).ok(),
        "id" => Some(kxy),
        _ => None,
    }
}

/// Run the generic engine on a built program: the fallback for architectures
/// or nonlinearities without a specialized closed-form path.
pub(crate) fn generic_kernel(
    built: &BuiltProgram,
    opts: &EngineOptions,
) -> Result<crate::engine::OutputKernel, ArchError> {
    let unwound =
        crate::lang::unwind(&built.typed).map_err(|e| ArchError::Engine(e.to_string()))?;
    let kt = crate::engine::compute_mu_sigma(&unwound, &built.sampling, opts)
        .map_err(|e| ArchError::Engine(e.to_string()))?;
    crate::engine::output_kernel(&kt, &unwound, &built.sigma_v, opts)
        .map_err(|e| ArchError::Engine(e.to_string()))
}

pub(crate) fn check_vectors(vectors: &[Vec<f64>], what: &str) -> Result<usize, ArchError> {
    if vectors.is_empty() {
        return Err(ArchError::BadPayload(format!("{what}: no vectors")));
    }
    let m = vectors[0].len();
    if m == 0 {
        return Err(ArchError::BadPayload(format!("{what}: zero input dimension")));
    }
    if vectors.iter().any(|v| v.len() != m) {
        return Err(ArchError::BadPayload(format!("{what}: inconsistent vector lengths")));
    }
    Ok(m)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
