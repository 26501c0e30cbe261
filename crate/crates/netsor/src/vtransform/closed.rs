//! Entrywise closed-form V-transforms for relu, erf, their derivatives, and
//! the exponential.

use nalgebra::DMatrix;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClosedKind {
    Relu,
    ReluPrime,
    Erf,
    ErfPrime,
    Exp { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum VtError {
    /// A correlation drifted past [-1, 1] by more than the clamp tolerance,
    /// i.e. the input was not PSD.
    CorrelationOutOfRange { value: f64 },
    NotSquare,
    NonFinite,
}

impl fmt::Display for VtError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VtError::CorrelationOutOfRange { value } => {
                write!(f, "correlation {value} outside [-1,1] beyond clamp tolerance; input not PSD")
            }
            VtError::NotSquare => write!(f, "V-transform input must be square"),
            VtError::NonFinite => write!(f, "V-transform produced a non-finite entry"),
        }
    }
}

impl std::error::Error for VtError {}

const CLAMP_TOL: f64 = 1e-12;

fn clamped_corr(kxy: f64, kxx: f64, kyy: f64) -> Result<f64, VtError> {
    // zero-variance convention: an a.s. zero coordinate has correlation 0
    if kxx <= 0.0 || kyy <= 0.0 {
        return Ok(0.0);
    }
    // diagonal entries have correlation exactly 1, not sqrt-rounded near 1
    if kxy == kxx && kxx == kyy {
        return Ok(1.0);
    }
    let c = kxy / (kxx * kyy).sqrt();
    if c > 1.0 + CLAMP_TOL || c < -1.0 - CLAMP_TOL {
        return Err(VtError::CorrelationOutOfRange { value: c });
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// E[relu(x) relu(y)] for zero-mean (x, y) with moments (kxx, kxy, kyy).
pub fn vrelu_pair(kxx: f64, kxy: f64, kyy: f64) -> Result<f64, VtError> {
    let c = clamped_corr(kxy, kxx, kyy)?;
    if c == 1.0 && kxx == kyy {
        return Ok(0.5 * kxx); // c = 1: half the common variance, exactly
    }
    let scale = (kxx.max(0.0) * kyy.max(0.0)).sqrt();
    Ok(((1.0 - c * c).max(0.0).sqrt() + (std::f64::consts::PI - c.acos()) * c) * scale
        / (2.0 * std::f64::consts::PI))
}

/// The ReLU-derivative entry `(pi - arccos c) / (2 pi)`, kept verbatim
/// without the sqrt(kxx kyy) scale.
pub fn vrelu_prime_pair(kxx: f64, kxy: f64, kyy: f64) -> Result<f64, VtError> {
    let c = clamped_corr(kxy, kxx, kyy)?;
    Ok((std::f64::consts::PI - c.acos()) / (2.0 * std::f64::consts::PI))
}

/// E[erf(x) erf(y)].
pub fn verf_pair(kxx: f64, kxy: f64, kyy: f64) -> Result<f64, VtError> {
    let denom = ((kxx + 0.5) * (kyy + 0.5)).sqrt();
    let r = kxy / denom;
    if r > 1.0 + CLAMP_TOL || r < -1.0 - CLAMP_TOL {
        return Err(VtError::CorrelationOutOfRange { value: r });
    }
    Ok(2.0 / std::f64::consts::PI * r.clamp(-1.0, 1.0).asin())
}

/// E[erf'(x) erf'(y)].
pub fn verf_prime_pair(kxx: f64, kxy: f64, kyy: f64) -> Result<f64, VtError> {
    let rad = (1.0 + 2.0 * kxx) * (1.0 + 2.0 * kyy) - 4.0 * kxy * kxy;
    if rad <= 0.0 {
        return Err(VtError::CorrelationOutOfRange { value: kxy });
    }
    Ok(4.0 / (std::f64::consts::PI * rad.sqrt()))
}

/// E[exp(x/sigma) exp(y/sigma)].
pub fn vexp_pair(kxx: f64, kxy: f64, kyy: f64, sigma: f64) -> Result<f64, VtError> {
    let v = ((kxx + 2.0 * kxy + kyy) / (2.0 * sigma * sigma)).exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VtError::NonFinite)
    }
}

/// Entrywise V-transform of a PSD matrix under the named closed form.
pub fn v_transform_closed(kind: ClosedKind, k: &DMatrix<f64>) -> Result<DMatrix<f64>, VtError> {
    if k.nrows() != k.ncols() {
        return Err(VtError::NotSquare);
    }
    let n = k.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let (kxx, kxy, kyy) = (k[(i, i)], k[(i, j)], k[(j, j)]);
            let v = match kind {
                ClosedKind::Relu => vrelu_pair(kxx, kxy, kyy)?,
                ClosedKind::ReluPrime => vrelu_prime_pair(kxx, kxy, kyy)?,
                ClosedKind::Erf => verf_pair(kxx, kxy, kyy)?,
                ClosedKind::ErfPrime => verf_prime_pair(kxx, kxy, kyy)?,
                ClosedKind::Exp { sigma } => vexp_pair(kxx, kxy, kyy, sigma)?,
            };
            if !v.is_finite() {
                return Err(VtError::NonFinite);
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
