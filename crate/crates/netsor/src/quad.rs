//! Deterministic numerical integration against Gaussian measures.
//!
//! Two backends:
//!
//! * iterated Gauss–Legendre in whitened coordinates for effective rank <= 3,
//!   with panels split at integrand kinks (located from the nonlinearity
//!   expression trees), which restores spectral accuracy for piecewise-smooth
//!   integrands like ReLU products;
//! * a shifted Kronecker-lattice quasi-Monte Carlo rule for higher ranks,
//!   with a standard error estimated from independent random shifts.

use crate::special::norm_quantile;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Integration cutoff in whitened standard-normal coordinates. The Gaussian
/// tail beyond 12 is ~2e-32; controlled integrands cannot bring it back to
/// relevance at double precision.
const CUTOFF: f64 = 12.0;

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            // Legendre P_n(z) and derivative
            let (mut p0, mut p1) = (1.0_f64, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let (mut p0, mut p1) = (1.0_f64, z);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
                x[i] = -z;
                x[n - 1 - i] = z;
                let wi = 2.0 / ((1.0 - z * z) * dp * dp);
                w[i] = wi;
                w[n - 1 - i] = wi;
                break;
            }
        }
    }
    (x, w)
}

/// An affine functional `c + v . u` in whitened coordinates whose zero set is
/// a potential integrand kink.
#[derive(Debug, Clone)]
pub struct KinkPlane {
    pub coeffs: Vec<f64>,
    pub constant: f64,
}

/// E[f(z)] for z = mean + L u, u ~ N(0, I_d), via iterated Gauss–Legendre
/// with the Gaussian density carried explicitly. `nodes` is per panel and
/// dimension; panels are split at zero and at the supplied kink planes.
pub fn expect_iterated_gl(
    l: &DMatrix<f64>,
    mean: &DVector<f64>,
    kinks: &[KinkPlane],
    nodes: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> f64 {
    let n = l.nrows();
    let d = l.ncols();
    if d == 0 {
        return f(mean.as_slice());
    }
    let per_dim = if d >= 3 { (nodes / 2).max(16) } else { nodes };
    let (gx, gw) = gauss_legendre(per_dim);

    // A kink is handled at the innermost level where it still has support.
    // At level j it is resolvable iff its coefficients vanish (relatively)
    // beyond j and are non-negligible at j.
    let level_of: Vec<Option<usize>> = kinks
        .iter()
        .map(|k| {
            let mx = k.coeffs.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
            if mx == 0.0 {
                return None;
            }
            let live: Vec<bool> = k.coeffs.iter().map(|c| c.abs() > 1e-12 * mx).collect();
            live.iter().rposition(|&b| b)
        })
        .collect();

    let mut u = vec![0.0; d];
    let mut z = vec![0.0; n];
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();

    fn level(
        j: usize,
        d: usize,
        u: &mut [f64],
        z: &mut [f64],
        gx: &[f64],
        gw: &[f64],
        kinks: &[KinkPlane],
        level_of: &[Option<usize>],
        l: &DMatrix<f64>,
        mean: &DVector<f64>,
        norm: f64,
        f: &mut dyn FnMut(&[f64]) -> f64,
    ) -> f64 {
        // collect breakpoints for this level given the fixed outer prefix
        let mut edges: Vec<f64> = vec![-CUTOFF, 0.0, CUTOFF];
        for (k, lv) in kinks.iter().zip(level_of) {
            if *lv == Some(j) {
                let mut c = k.constant;
                for jj in 0..j {
                    c += k.coeffs[jj] * u[jj];
                }
                let b = -c / k.coeffs[j];
                if b > -CUTOFF && b < CUTOFF {
                    edges.push(b);
                }
            }
        }
        edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
        edges.dedup_by(|a, b| (*a - *b).abs() < 1e-13);

        let mut total = 0.0;
        for p in 0..edges.len() - 1 {
            let (lo, hi) = (edges[p], edges[p + 1]);
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for (xx, ww) in gx.iter().zip(gw) {
                let uj = mid + half * xx;
                u[j] = uj;
                let dens = norm * (-0.5 * uj * uj).exp();
                let inner = if j + 1 == d {
                    for r in 0..l.nrows() {
                        let mut acc = mean[r];
                        for c in 0..d {
                            acc += l[(r, c)] * u[c];
                        }
                        z[r] = acc;
                    }
                    f(z)
                } else {
                    level(j + 1, d, u, z, gx, gw, kinks, level_of, l, mean, norm, f)
                };
                total += ww * half * dens * inner;
            }
        }
        total
    }

    level(0, d, &mut u, &mut z, &gx, &gw, kinks, &level_of, l, mean, norm, f)
}

/// First 128 primes, for the Kronecker lattice generator.
fn primes(n: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(n);
    let mut k = 2u64;
    while out.len() < n {
        if (2..).take_while(|p| p * p <= k).all(|p| k % p != 0) {
            out.push(k);
        }
        k += 1;
    }
    out
}

/// E[f(z)] for z = mean + L u via randomized Kronecker-lattice QMC mapped
/// through the normal quantile. Returns (estimate, standard error across
/// shifts). Deterministic for a fixed seed.
pub fn expect_qmc(
    l: &DMatrix<f64>,
    mean: &DVector<f64>,
    points: usize,
    shifts: usize,
    seed: u64,
    f: &mut dyn FnMut(&[f64]) -> f64,
) -> (f64, f64) {
    let n = l.nrows();
    let d = l.ncols();
    if d == 0 {
        return (f(mean.as_slice()), 0.0);
    }
    let alphas: Vec<f64> = primes(d).iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let per_shift = (points / shifts).max(1);
    let mut estimates = Vec::with_capacity(shifts);
    let mut u = vec![0.0; d];
    let mut z = vec![0.0; n];
    for _ in 0..shifts {
        let offset: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
        let mut acc = 0.0;
        for k in 0..per_shift {
            for i in 0..d {
                let v = (k as f64 * alphas[i] + offset[i]).fract();
                u[i] = norm_quantile(v.clamp(1e-15, 1.0 - 1e-15));
            }
            for r in 0..n {
                let mut s = mean[r];
                for c in 0..d {
                    s += l[(r, c)] * u[c];
                }
                z[r] = s;
            }
            acc += f(&z);
        }
        estimates.push(acc / per_shift as f64);
    }
    let m = estimates.iter().sum::<f64>() / shifts as f64;
    let var = estimates.iter().map(|e| (e - m) * (e - m)).sum::<f64>()
        / (shifts.max(2) - 1) as f64;
    (m, (var / shifts as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gl_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // integral of x^6 over [-1,1] = 2/7
        let s: f64 = x.iter().zip(&w).map(|(xi, wi)| wi * xi.powi(6)).sum();
        assert_abs_diff_eq!(s, 2.0 / 7.0, epsilon = 1e-14);
        let total: f64 = w.iter().sum();
        assert_abs_diff_eq!(total, 2.0, epsilon = 1e-13);
    }

    #[test]
    fn relu_pair_matches_closed_form() {
        // E relu(z1) relu(z2) for correlated standard normals, against the
        // arc-cosine formula
        let rho: f64 = 0.6;
        let k = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let l = crate::linalg::psd_factor(&k, 1e-14);
        let kinks: Vec<KinkPlane> = (0..2)
            .map(|i| KinkPlane { coeffs: (0..2).map(|c| l[(i, c)]).collect(), constant: 0.0 })
            .collect();
        let got = expect_iterated_gl(&l, &DVector::zeros(2), &kinks, 64, &mut |z| {
            z[0].max(0.0) * z[1].max(0.0)
        });
        let c = rho;
        let exact = ((1.0 - c * c).sqrt() + (std::f64::consts::PI - c.acos()) * c)
            / (2.0 * std::f64::consts::PI);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-12);
    }

    #[test]
    fn qmc_estimates_second_moment() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = crate::linalg::psd_factor(&k, 1e-14);
        let (est, se) = expect_qmc(&l, &DVector::zeros(2), 1 << 14, 8, 7, &mut |z| z[0] * z[1]);
        assert!((est - 0.5).abs() < 5.0 * se.max(2e-3), "est {est} se {se}");
    }
}
