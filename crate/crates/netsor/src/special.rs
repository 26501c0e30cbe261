//! Scalar special functions shared across the crate.

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Upper tail of the standard normal.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Logistic-shaped gate (1 + erf(x)) / 2.
pub fn sigmoid_erf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x))
}

/// Inverse standard normal CDF.
///
/// A rough rational seed refined by Halley steps against the machine-accurate
/// `norm_cdf`; accurate to a few ulps over (0, 1).
pub fn norm_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "norm_quantile domain: p in (0,1), got {p}");
    if p == 0.5 {
        return 0.0;
    }
    // Seed: Bagby-style approximation through the tail transform.
    let mut x = {
        let q = p.min(1.0 - p);
        let t = (-2.0 * q.ln()).sqrt();
        // Abramowitz-Stegun 26.2.23, |err| < 4.5e-4
        let num = 2.515517 + t * (0.802853 + t * 0.010328);
        let den = 1.0 + t * (1.432788 + t * (0.189269 + t * 0.001308));
        let v = t - num / den;
        if p < 0.5 {
            -v
        } else {
            v
        }
    };
    // Halley refinement: f(x) = cdf(x) - p, f' = pdf, f'' = -x pdf.
    for _ in 0..3 {
        let e = norm_cdf(x) - p;
        let d = norm_pdf(x);
        if d == 0.0 {
            break;
        }
        let u = e / d;
        x -= u / (1.0 + 0.5 * x * u).max(0.5);
    }
    x
}

/// Row softmax over the first `len` entries; the rest are treated as masked
/// (weight 0). Stable against overflow.
pub fn softmax_masked(logits: &[f64], len: usize, out: &mut [f64]) {
    debug_assert!(len >= 1 && len <= logits.len() && out.len() >= logits.len());
    let m = logits[..len].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in 0..len {
        let e = (logits[j] - m).exp();
        out[j] = e;
        z += e;
    }
    for v in out.iter_mut().take(len) {
        *v /= z;
    }
    for v in out.iter_mut().take(logits.len()).skip(len) {
        *v = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-9] {
            let x = norm_quantile(p);
            assert_abs_diff_eq!(norm_cdf(x), p, epsilon = 1e-13 * p.max(1e-3));
        }
    }

    #[test]
    fn quantile_known_values() {
        assert_abs_diff_eq!(norm_quantile(0.975), 1.959963984540054, epsilon = 1e-10);
        assert_abs_diff_eq!(norm_quantile(0.5), 0.0, epsilon = 0.0);
    }

    #[test]
    fn softmax_masks_and_normalizes() {
        let mut out = [0.0; 4];
        softmax_masked(&[1.0, 2.0, 100.0, 3.0], 2, &mut out);
        assert_abs_diff_eq!(out[0] + out[1], 1.0, epsilon = 1e-15);
        assert_eq!(out[2], 0.0);
        assert_eq!(out[3], 0.0);
        assert!(out[1] > out[0]);
    }
}
