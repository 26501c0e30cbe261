//! Batchnorm + ReLU V-transform via 1D / 2D integral reductions.
//!
//! The B-dimensional Gaussian expectation behind batchnorm collapses to a 1D
//! (within batch) or 2D (across batches) integral over auxiliary scale
//! variables. Working with eigenvalue ratios of the centered covariance makes
//! the result exactly invariant under rescaling of the input kernel, which is
//! the defining symmetry of batchnorm.

use crate::linalg::sym_eig_psd;
use crate::quad::gauss_legendre;
use nalgebra::DMatrix;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum BatchnormError {
    BatchTooSmall { size: usize },
    /// Centered covariance numerically zero: the per-neuron batch variance
    /// vanishes in the limit and batchnorm is undefined.
    DegenerateBatch,
    NotSquare,
}

impl fmt::Display for BatchnormError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchnormError::BatchTooSmall { size } => {
                write!(f, "batchnorm needs batch size >= 2, got {size}")
            }
            BatchnormError::DegenerateBatch => {
                write!(f, "centered batch covariance is numerically zero")
            }
            BatchnormError::NotSquare => write!(f, "kernel block must be square"),
        }
    }
}

impl std::error::Error for BatchnormError {}

const NODES: usize = 128;

fn centering(b: usize) -> DMatrix<f64> {
    DMatrix::from_fn(b, b, |i, j| if i == j { 1.0 - 1.0 / b as f64 } else { -1.0 / b as f64 })
}

/// Entrywise ReLU V-transform with unconditional correlation clamping: the
/// integrand matrices here come out of a matrix inverse and can overshoot
/// [-1, 1] by iteration noise at interior quadrature nodes.
fn vrelu_lenient(k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = k.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let (kxx, kxy, kyy) = (k[(i, i)], k[(i, j)], k[(j, j)]);
        if kxx <= 0.0 || kyy <= 0.0 {
            return 0.0;
        }
        let c = (kxy / (kxx * kyy).sqrt()).clamp(-1.0, 1.0);
        ((1.0 - c * c).max(0.0).sqrt() + (std::f64::consts::PI - c.acos()) * c)
            * (kxx * kyy).sqrt()
            / (2.0 * std::f64::consts::PI)
    })
}

/// Within-batch V-transform of batchnorm followed by ReLU:
/// `E phi~(z) phi~(z)^T` for `z ~ N(0, K)`, as the 1D integral
/// `B * Int_0^inf Vrelu(S (I + 2 s S)^{-1}) / sqrt(det(I + 2 s S)) ds`
/// with `S = G K G` the centered kernel.
pub fn batchnorm_v_single(k: &DMatrix<f64>) -> Result<DMatrix<f64>, BatchnormError> {
    let b = k.nrows();
    if k.ncols() != b {
        return Err(BatchnormError::NotSquare);
    }
    if b < 2 {
        return Err(BatchnormError::BatchTooSmall { size: b });
    }
    let g = centering(b);
    let sg = &g * k * &g;
    let (vals, q) = sym_eig_psd(&sg);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let scale = k.diagonal().iter().cloned().fold(0.0_f64, f64::max).max(1e-300);
    if lmax <= 1e-12 * scale {
        return Err(BatchnormError::DegenerateBatch);
    }
    // eigenvalue ratios: exact scale invariance
    let rho: Vec<f64> = vals.iter().map(|&l| (l / lmax).max(0.0)).collect();

    let (gx, gw) = gauss_legendre(NODES);
    let mut total = DMatrix::zeros(b, b);
    for (x, w) in gx.iter().zip(&gw) {
        // u in (0,1), sigma = u/(1-u) covers (0, inf)
        let u = 0.5 * (x + 1.0);
        let wu = 0.5 * w;
        let sigma = u / (1.0 - u);
        let jac = 1.0 / ((1.0 - u) * (1.0 - u));
        let mut det = 1.0;
        let mut diag = vec![0.0; b];
        for i in 0..b {
            let d = 1.0 + 2.0 * sigma * rho[i];
            det *= d;
            diag[i] = rho[i] / d;
        }
        let m = &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag)) * q.transpose();
        let v = vrelu_lenient(&m);
        total += v * (wu * jac / det.sqrt());
    }
    total *= b as f64;
    crate::linalg::symmetrize(&mut total);
    Ok(total)
}

/// Cross-batch block of the batchnorm+ReLU V-transform from the joint kernel
/// blocks, as the 2D integral over auxiliary scales for the two batches.
/// Returns the `B_a x B_b` block.
pub fn batchnorm_v_cross(
    kaa: &DMatrix<f64>,
    kab: &DMatrix<f64>,
    kbb: &DMatrix<f64>,
) -> Result<DMatrix<f64>, BatchnormError> {
    let ba = kaa.nrows();
    let bb = kbb.nrows();
    if kaa.ncols() != ba || kbb.ncols() != bb || kab.nrows() != ba || kab.ncols() != bb {
        return Err(BatchnormError::NotSquare);
    }
    if ba < 2 {
        return Err(BatchnormError::BatchTooSmall { size: ba });
    }
    if bb < 2 {
        return Err(BatchnormError::BatchTooSmall { size: bb });
    }
    let n = ba + bb;
    let (ga, gb) = (centering(ba), centering(bb));
    // centered joint covariance [[Ga Kaa Ga, Ga Kab Gb], [.., Gb Kbb Gb]]
    let mut sg = DMatrix::zeros(n, n);
    sg.view_mut((0, 0), (ba, ba)).copy_from(&(&ga * kaa * &ga));
    let cross = &ga * kab * &gb;
    sg.view_mut((0, ba), (ba, bb)).copy_from(&cross);
    sg.view_mut((ba, 0), (bb, ba)).copy_from(&cross.transpose());
    sg.view_mut((ba, ba), (bb, bb)).copy_from(&(&gb * kbb * &gb));
    crate::linalg::symmetrize(&mut sg);

    let (vals, _) = sym_eig_psd(&sg);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let scale = kaa
        .diagonal()
        .iter()
        .chain(kbb.diagonal().iter())
        .cloned()
        .fold(0.0_f64, f64::max)
        .max(1e-300);
    if lmax <= 1e-12 * scale {
        return Err(BatchnormError::DegenerateBatch);
    }
    let sgn = &sg / lmax;

    // sigma = r^2 with r = u/(1-u): the substitution absorbs the
    // (sigma tau)^{-1/2} endpoint singularity exactly
    let (gx, gw) = gauss_legendre(NODES);
    let rs: Vec<(f64, f64)> = gx
        .iter()
        .zip(&gw)
        .map(|(x, w)| {
            let u = 0.5 * (x + 1.0);
            (u / (1.0 - u), 0.5 * w / ((1.0 - u) * (1.0 - u)))
        })
        .collect();

    let mut total = DMatrix::zeros(ba, bb);
    for &(r, wr) in &rs {
        let sigma = r * r;
        for &(q, wq) in &rs {
            let tau = q * q;
            // D = sigma I_a (+) tau I_b; Omega = D^{1/2} S D^{1/2}
            let dsqrt: Vec<f64> =
                (0..n).map(|i| if i < ba { sigma.sqrt() } else { tau.sqrt() }).collect();
            let mut omega = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    omega[(i, j)] = dsqrt[i] * sgn[(i, j)] * dsqrt[j];
                }
            }
            let mut a = DMatrix::identity(n, n);
            a += 2.0 * &omega;
            let lu = a.clone().lu();
            let det = lu.determinant();
            let inv = match lu.try_inverse() {
                Some(m) => m,
                None => continue,
            };
            // Pi = D^{-1/2} Omega (I + 2 Omega)^{-1} D^{-1/2}
            let core = &omega * &inv;
            let mut pi = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    pi[(i, j)] = core[(i, j)] / (dsqrt[i] * dsqrt[j]);
                }
            }
            crate::linalg::symmetrize(&mut pi);
            let v = vrelu_lenient(&pi);
            let weight = 4.0 * wr * wq / det.sqrt();
            for i in 0..ba {
                for j in 0..bb {
                    total[(i, j)] += weight * v[(i, ba + j)];
                }
            }
        }
    }
    let pref = ((ba * bb) as f64).sqrt() / std::f64::consts::PI;
    Ok(total * pref)
}
