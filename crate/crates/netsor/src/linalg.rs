//! Small dense symmetric-matrix helpers used by the kernel engine and the
//! closed-form integral reductions.

use nalgebra::{DMatrix, DVector};

/// Symmetric eigendecomposition with eigenvalues clamped at zero.
/// Returns (eigenvalues ascending, eigenvectors as columns).
pub fn sym_eig_psd(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

/// Relative PSD check: min eigenvalue >= -tol * max(|eigenvalue|, 1e-300).
pub fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    let (vals, _) = sym_eig_psd(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, |a, b| a.max(b.abs()));
    vals.iter().all(|&l| l >= -tol * lmax.max(1e-300))
}

/// Factor a PSD matrix as `L L^T` with `L` of shape (n, r), dropping
/// directions whose eigenvalue is below `cut * lambda_max`. Eigenvalues more
/// negative than the PSD tolerance are the caller's problem; mildly negative
/// ones are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>, cut: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eig_psd(m);
    let lmax = vals.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > cut * lmax.max(1e-300)).collect();
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, keep.len());
    for (col, &i) in keep.iter().enumerate() {
        let s = vals[i].max(0.0).sqrt();
        for row in 0..n {
            l[(row, col)] = vecs[(row, i)] * s;
        }
    }
    l
}

/// Pivoted Cholesky of a PSD matrix. Returns (L, perm) with
/// `P M P^T = L L^T` where row `i` of `L` corresponds to original index
/// `perm[i]`; columns beyond the numerical rank are zero.
pub fn pivoted_cholesky(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, Vec<usize>) {
    let n = m.nrows();
    let mut a = m.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut l = DMatrix::zeros(n, n);
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max).max(1e-300);
    for k in 0..n {
        // pivot on the largest remaining diagonal
        let (piv, &dmax) = a
            .diagonal()
            .iter()
            .enumerate()
            .skip(k)
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap();
        if dmax <= tol * scale {
            break;
        }
        a.swap_rows(k, piv);
        a.swap_columns(k, piv);
        l.swap_rows(k, piv);
        perm.swap(k, piv);
        let d = a[(k, k)].sqrt();
        l[(k, k)] = d;
        for i in k + 1..n {
            l[(i, k)] = a[(i, k)] / d;
        }
        for i in k + 1..n {
            for j in k + 1..=i {
                a[(i, j)] -= l[(i, k)] * l[(j, k)];
                a[(j, i)] = a[(i, j)];
            }
        }
    }
    (l, perm)
}

/// Condition number of a symmetric PSD matrix (ratio of extreme eigenvalues).
pub fn sym_condition(m: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eig_psd(m);
    let lmax = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmax <= 0.0 {
        return f64::INFINITY;
    }
    if lmin <= 0.0 {
        f64::INFINITY
    } else {
        lmax / lmin
    }
}

/// Force exact symmetry by averaging with the transpose.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
