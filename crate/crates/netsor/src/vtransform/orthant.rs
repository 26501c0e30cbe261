//! Multivariate normal orthant probabilities `Pr[x >= 0]`.
//!
//! Dimension 1 and 2 use closed forms (the bivariate case is a port of Genz's
//! tvpack BVND routine). Dimensions 3..=32 use Genz separation-of-variables
//! with a shifted Kronecker-lattice rule; the standard error is estimated
//! across independent shifts and is zero for the closed-form paths.

use crate::linalg::pivoted_cholesky;
use crate::special::{norm_cdf, norm_quantile};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;

pub const DEFAULT_DIM_CAP: usize = 32;
pub const DEFAULT_POINTS: usize = 1 << 14;

#[derive(Debug, Clone)]
pub struct OrthantQuery {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Lattice budget for the separation-of-variables path.
    pub points: usize,
    /// Deterministic scrambling seed.
    pub seed: u64,
    /// Refuse queries above this dimension.
    pub dim_cap: usize,
}

impl OrthantQuery {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        OrthantQuery { mean, cov, points: DEFAULT_POINTS, seed: 0, dim_cap: DEFAULT_DIM_CAP }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OrthantError {
    DimensionMismatch,
    UnsupportedDimension { dim: usize, cap: usize },
}

impl fmt::Display for OrthantError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrthantError::DimensionMismatch => write!(f, "mean/covariance dimensions disagree"),
            OrthantError::UnsupportedDimension { dim, cap } => {
                write!(f, "orthant dimension {dim} exceeds cap {cap}")
            }
        }
    }
}

impl std::error::Error for OrthantError {}

/// Genz tvpack BVND: `Pr[X > dh, Y > dk]` for standard bivariate normals with
/// correlation `r`.
pub fn bvnd(dh: f64, dk: f64, r: f64) -> f64 {
    // Gauss-Legendre (w, x) pairs for the three accuracy regimes.
    const QUAD_6: [(f64, f64); 3] = [
        (0.1713244923791705, -0.9324695142031522),
        (0.3607615730481384, -0.6612093864662647),
        (0.4679139345726904, -0.2386191860831970),
    ];
    const QUAD_12: [(f64, f64); 6] = [
        (0.04717533638651177, -0.9815606342467191),
        (0.1069393259953183, -0.9041172563704750),
        (0.1600783285433464, -0.7699026741943050),
        (0.2031674267230659, -0.5873179542866171),
        (0.2334925365383547, -0.3678314989981802),
        (0.2491470458134029, -0.1252334085114692),
    ];
    const QUAD_20: [(f64, f64); 10] = [
        (0.01761400713915212, -0.9931285991850949),
        (0.04060142980038694, -0.9639719272779138),
        (0.06267204833410906, -0.9122344282513259),
        (0.08327674157670475, -0.8391169718222188),
        (0.1019301198172404, -0.7463319064601508),
        (0.1181945319615184, -0.6360536807265150),
        (0.1316886384491766, -0.5108670019508271),
        (0.1420961093183821, -0.3737060887154196),
        (0.1491729864726037, -0.2277858511416451),
        (0.1527533871307259, -0.07652652113349733),
    ];
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &QUAD_6
    } else if r.abs() < 0.75 {
        &QUAD_12
    } else {
        &QUAD_20
    };

    let frac_1_2pi = 1.0 / (2.0 * std::f64::consts::PI);
    let h = dh;
    let mut k = dk;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() <= 0.925 {
        if r.abs() > 0.0 {
            let hs = 0.5 * (h * h + k * k);
            let asr = 0.5 * r.asin();
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let sn = (asr * (is * x + 1.0)).sin();
                    bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
                }
            }
            bvn *= asr * frac_1_2pi;
        }
        bvn + norm_cdf(-h) * norm_cdf(-k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let a_s = (1.0 - r) * (1.0 + r);
            let mut a = a_s.sqrt();
            let b_s = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            let asr = -0.5 * (b_s / a_s + hk);
            if asr > -100.0 {
                bvn = a
                    * asr.exp()
                    * (1.0 - c * (b_s - a_s) * (1.0 - d * b_s / 5.0) / 3.0
                        + c * d * a_s * a_s / 5.0);
            }
            if -hk < 100.0 {
                let b = b_s.sqrt();
                bvn -= (-0.5 * hk).exp()
                    * (2.0 * std::f64::consts::PI).sqrt()
                    * norm_cdf(-b / a)
                    * b
                    * (1.0 - c * b_s * (1.0 - d * b_s / 5.0) / 3.0);
            }
            a /= 2.0;
            for &(w, x) in quad {
                for is in [-1.0, 1.0] {
                    let xs = (a * (is * x + 1.0)) * (a * (is * x + 1.0));
                    let rs = (1.0 - xs).sqrt();
                    let asr = -0.5 * (b_s / xs + hk);
                    if asr > -100.0 {
                        bvn += a
                            * w
                            * asr.exp()
                            * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                                - (1.0 + c * xs * (1.0 + d * xs)));
                    }
                }
            }
            bvn *= -frac_1_2pi;
        }
        if r > 0.0 {
            bvn + norm_cdf(-h.max(k))
        } else {
            let mut v = -bvn;
            if k > h {
                v += norm_cdf(k) - norm_cdf(h);
            }
            v
        }
    }
}

/// `Pr[x >= 0]` with the estimate and a standard error (0 for closed forms).
pub fn orthant_probability(q: &OrthantQuery) -> Result<(f64, f64), OrthantError> {
    let d = q.mean.len();
    if q.cov.nrows() != d || q.cov.ncols() != d {
        return Err(OrthantError::DimensionMismatch);
    }
    if d == 0 {
        return Ok((1.0, 0.0));
    }
    if d > q.dim_cap {
        return Err(OrthantError::UnsupportedDimension { dim: d, cap: q.dim_cap });
    }
    if d == 1 {
        let v = q.cov[(0, 0)].max(0.0);
        if v == 0.0 {
            return Ok((if q.mean[0] >= 0.0 { 1.0 } else { 0.0 }, 0.0));
        }
        return Ok((norm_cdf(q.mean[0] / v.sqrt()), 0.0));
    }
    if d == 2 {
        let (v1, v2) = (q.cov[(0, 0)].max(0.0), q.cov[(1, 1)].max(0.0));
        if v1 == 0.0 || v2 == 0.0 {
            // marginalize the deterministic coordinate
            let (det_m, live) = if v1 == 0.0 { (q.mean[0], 1) } else { (q.mean[1], 0) };
            if det_m < 0.0 {
                return Ok((0.0, 0.0));
            }
            let sub = OrthantQuery::new(
                DVector::from_element(1, q.mean[live]),
                DMatrix::from_element(1, 1, q.cov[(live, live)]),
            );
            return orthant_probability(&sub);
        }
        let rho = (q.cov[(0, 1)] / (v1 * v2).sqrt()).clamp(-1.0, 1.0);
        return Ok((bvnd(-q.mean[0] / v1.sqrt(), -q.mean[1] / v2.sqrt(), rho), 0.0));
    }
    Ok(genz_sov(q))
}

/// Genz separation-of-variables over a shifted Kronecker lattice.
fn genz_sov(q: &OrthantQuery) -> (f64, f64) {
    let d = q.mean.len();
    // lower limits a <= y, y ~ N(0, cov), a = -mean; upper limits infinite
    let (l, perm) = pivoted_cholesky(&q.cov, 1e-12);
    let a: Vec<f64> = (0..d).map(|i| -q.mean[perm[i]]).collect();
    let scale = (0..d).map(|i| q.cov[(i, i)]).fold(0.0_f64, f64::max).max(1e-300);

    let alphas: Vec<f64> = {
        let mut primes = Vec::new();
        let mut k = 2u64;
        while primes.len() < d {
            if (2..).take_while(|p| p * p <= k).all(|p| k % p != 0) {
                primes.push(k);
            }
            k += 1;
        }
        primes.iter().map(|&p| (p as f64).sqrt().fract()).collect()
    };

    const SHIFTS: usize = 12;
    let per_shift = (q.points / SHIFTS).max(32);
    let mut rng = ChaCha8Rng::seed_from_u64(q.seed ^ 0x6f81_5133_0f4b_12c7);
    let mut estimates = Vec::with_capacity(SHIFTS);
    let mut y = vec![0.0; d];
    for _ in 0..SHIFTS {
        let offset: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let mut acc = 0.0;
        for kpt in 0..per_shift {
            let mut prob = 1.0;
            for i in 0..d {
                let mut resid = a[i];
                for j in 0..i {
                    resid -= l[(i, j)] * y[j];
                }
                let lii = l[(i, i)];
                let di = if lii <= 1e-12 * scale.sqrt() {
                    // deterministic coordinate: constraint either holds or not
                    if resid <= 1e-12 * scale.sqrt() {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    norm_cdf(resid / lii)
                };
                prob *= 1.0 - di;
                if prob == 0.0 {
                    break;
                }
                if i + 1 < d {
                    let u = (kpt as f64 * alphas[i] + offset[i]).fract();
                    let t = (di + u * (1.0 - di)).clamp(1e-16, 1.0 - 1e-16);
                    y[i] = norm_quantile(t);
                }
            }
            acc += prob;
        }
        estimates.push(acc / per_shift as f64);
    }
    let m = estimates.iter().sum::<f64>() / SHIFTS as f64;
    let var =
        estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / (SHIFTS - 1) as f64;
    (m, (var / SHIFTS as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bivariate_sheppard() {
        // Pr[x>=0, y>=0] = 1/4 + asin(rho)/(2 pi)
        for &rho in &[-0.9, -0.3, 0.0, 0.5, 0.95] {
            let q = OrthantQuery::new(
                DVector::zeros(2),
                DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
            );
            let (p, _) = orthant_probability(&q).unwrap();
            let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
            assert_abs_diff_eq!(p, exact, epsilon = 5e-15);
        }
    }

    #[test]
    fn far_positive_mean_is_one() {
        let q = OrthantQuery::new(DVector::from_element(2, 10.0), DMatrix::identity(2, 2));
        let (p, _) = orthant_probability(&q).unwrap();
        assert_abs_diff_eq!(p, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn independent_dims_power_of_two() {
        for d in [3usize, 5] {
            let q = OrthantQuery::new(DVector::zeros(d), DMatrix::identity(d, d));
            let (p, se) = orthant_probability(&q).unwrap();
            let exact = 0.5_f64.powi(d as i32);
            assert!((p - exact).abs() < (3.0 * se).max(1e-4), "d={d} p={p} se={se}");
        }
    }

    #[test]
    fn dimension_cap_enforced() {
        let d = 33;
        let q = OrthantQuery::new(DVector::zeros(d), DMatrix::identity(d, d));
        assert!(matches!(
            orthant_probability(&q),
            Err(OrthantError::UnsupportedDimension { dim: 33, cap: 32 })
        ));
    }

    #[test]
    fn equicorrelated_trivariate() {
        // For equicorrelation rho, Pr[x >= 0] has the closed form
        // 1/8 + 3 asin(rho) / (4 pi).
        let rho = 0.5;
        let mut cov = DMatrix::from_element(3, 3, rho);
        cov.fill_diagonal(1.0);
        let q = OrthantQuery::new(DVector::zeros(3), cov);
        let (p, se) = orthant_probability(&q).unwrap();
        let exact = 0.125 + 3.0 * (rho as f64).asin() / (4.0 * std::f64::consts::PI);
        assert!((p - exact).abs() < (3.0 * se).max(2e-4), "p={p} exact={exact} se={se}");
    }
}
