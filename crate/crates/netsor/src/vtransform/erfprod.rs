//! Gaussian expectations of products of erf and of the gate (1 + erf)/2.
//!
//! Both reduce to sign-product / orthant computations under the covariance
//! inflated by I/2: erf is the Gaussian-smoothed sign function, coordinate by
//! coordinate.

use super::orthant::{orthant_probability, OrthantError, OrthantQuery};
use nalgebra::{DMatrix, DVector};

/// E prod_i sgn(x_i) for x ~ N(mean, cov).
///
/// Expands sgn = 1 - 2*[x < 0] over subsets, so each term is an orthant
/// probability of dimension |S| (closed form for |S| <= 2).
pub fn sign_product_expectation(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    points: usize,
    seed: u64,
) -> Result<(f64, f64), OrthantError> {
    let t = mean.len();
    if cov.nrows() != t || cov.ncols() != t {
        return Err(OrthantError::DimensionMismatch);
    }
    let mut total = 0.0;
    let mut err_sq = 0.0;
    // subset S of coordinates required negative
    for mask in 0u32..(1 << t) {
        let s: Vec<usize> = (0..t).filter(|i| mask >> i & 1 == 1).collect();
        let sign = if s.len() % 2 == 0 { 1.0 } else { -1.0 };
        let coef = sign * 2f64.powi(s.len() as i32);
        if s.is_empty() {
            total += 1.0;
            continue;
        }
        // Pr[x_S < 0] = Pr[-x_S >= 0] (boundary has measure zero unless the
        // restriction is degenerate, which the orthant path handles)
        let sub_mean = DVector::from_iterator(s.len(), s.iter().map(|&i| -mean[i]));
        let sub_cov =
            DMatrix::from_fn(s.len(), s.len(), |r, c| cov[(s[r], s[c])]);
        let mut q = OrthantQuery::new(sub_mean, sub_cov);
        q.points = points;
        q.seed = seed.wrapping_add(mask as u64);
        let (p, se) = orthant_probability(&q)?;
        total += coef * p;
        err_sq += (coef * se) * (coef * se);
    }
    Ok((total, err_sq.sqrt()))
}

/// E prod_i erf(x_i) for x ~ N(mean, cov): the sign-product expectation under
/// the covariance inflated by I/2.
pub fn erf_product_expectation(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    points: usize,
    seed: u64,
) -> Result<(f64, f64), OrthantError> {
    let mut inflated = cov.clone();
    for i in 0..cov.nrows() {
        inflated[(i, i)] += 0.5;
    }
    sign_product_expectation(mean, &inflated, points, seed)
}

/// E prod_i sigma(x_i) with sigma = (1 + erf)/2: the orthant probability of
/// N(mean, cov + I/2).
pub fn sigmoid_product_expectation(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    points: usize,
    seed: u64,
) -> Result<(f64, f64), OrthantError> {
    let mut inflated = cov.clone();
    for i in 0..cov.nrows() {
        inflated[(i, i)] += 0.5;
    }
    let mut q = OrthantQuery::new(mean.clone(), inflated);
    q.points = points;
    q.seed = seed;
    orthant_probability(&q)
}
