//! Empirical kernels and width-convergence studies.

use super::forward::{forward, instantiate, SimError};
use crate::engine::SamplingSpec;
use crate::lang::TypedProgram;
use crate::nonlin::NonlinSpec;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

/// Sample covariance of the program outputs over independent seeds, with the
/// per-entry standard error of the estimate.
pub fn empirical_kernel(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    width: usize,
    seeds: usize,
    master_seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>), SimError> {
    if seeds < 2 {
        return Err(SimError::NotEnoughSeeds);
    }
    if width < 1 {
        return Err(SimError::WidthTooSmall);
    }
    let samples: Vec<Vec<f64>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let inst = instantiate(tp, spec, width, master_seed.wrapping_add(s as u64))?;
            Ok(forward(tp, &inst)?.outputs)
        })
        .collect::<Result<_, SimError>>()?;
    let m = samples[0].len();
    let mut mean = vec![0.0; m];
    for row in &samples {
        for (a, b) in mean.iter_mut().zip(row) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|a| *a /= seeds as f64);
    // unbiased covariance of centered outputs; the theoretical zero mean is
    // deliberately not assumed
    let mut cov = DMatrix::zeros(m, m);
    for row in &samples {
        for i in 0..m {
            for j in 0..=i {
                let v = (row[i] - mean[i]) * (row[j] - mean[j]);
                cov[(i, j)] += v;
            }
        }
    }
    for i in 0..m {
        for j in 0..=i {
            let v = cov[(i, j)] / (seeds - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    // Gaussian-moment standard error of a covariance estimate
    let se = DMatrix::from_fn(m, m, |i, j| {
        let v: f64 = (cov[(i, i)] * cov[(j, j)] + cov[(i, j)] * cov[(i, j)]) / (seeds - 1) as f64;
        v.max(0.0).sqrt()
    });
    Ok((cov, se))
}

/// One empirical moment `1/n sum_alpha psi(g^1_alpha, ..., g^M_alpha)` for a
/// single instantiation; `gvars` names the arguments in slot order.
pub fn empirical_moment(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    width: usize,
    seed: u64,
    psi: &NonlinSpec,
    gvars: &[&str],
) -> Result<f64, SimError> {
    let inst = instantiate(tp, spec, width, seed)?;
    let run = forward(tp, &inst)?;
    let args: Vec<&[f64]> = gvars.iter().map(|g| run.vectors[*g].as_slice()).collect();
    let mut acc = super::exactsum::ExactAcc::new();
    let mut slot = vec![0.0; args.len()];
    for alpha in 0..width {
        for (k, a) in args.iter().enumerate() {
            slot[k] = a[alpha];
        }
        acc.add(psi.expr.eval(&slot, &[]));
    }
    Ok(acc.finalize() / width as f64)
}

/// Per-width summary of a convergence study.
#[derive(Debug, Clone, Serialize)]
pub struct WidthRow {
    pub width: usize,
    pub n_seeds: usize,
    /// Relative Frobenius distance of the empirical covariance to theory.
    pub frob_rel: f64,
    /// Median entrywise standard error of the covariance estimate.
    pub entry_std_median: f64,
}

/// Result of a Master-Theorem convergence study: per-width distances plus the
/// fitted log-log slope with a confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalReport {
    pub rows: Vec<WidthRow>,
    pub slope: f64,
    /// Half-width of the ~95% interval on the slope.
    pub slope_ci: f64,
}

impl EmpiricalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("width,n_seeds,frob_rel,slope\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.width, r.n_seeds, r.frob_rel, self.slope
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Per-instantiation estimate of the GP kernel from output-variable feature
/// inner products: `K^_ij = sigma_v^2 <y_i, y_j> / n` within a readout group
/// (zero across groups). This is the Master-Theorem empirical moment whose
/// limit is the kernel, so it concentrates at the 1/sqrt(width) rate; the
/// covariance of the output scalars would instead carry a width-independent
/// estimation floor.
pub fn feature_kernel(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    width: usize,
    seed: u64,
) -> Result<DMatrix<f64>, SimError> {
    let inst = instantiate(tp, spec, width, seed)?;
    let run = forward(tp, &inst)?;
    let outs = tp.outputs();
    let m = outs.len();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            if outs[i].readout != outs[j].readout {
                continue;
            }
            let sv2 = spec.sigma_v.get(&outs[i].readout).copied().unwrap_or(1.0);
            let v = sv2
                * super::exactsum::exact_dot(&run.vectors[&outs[i].hvar], &run.vectors[&outs[j].hvar])
                / width as f64;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Fit the relative Frobenius distance of seed-averaged feature kernels to
/// the theoretical kernel as a power of the width.
pub fn convergence_study(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    widths: &[usize],
    seeds: usize,
    theory: &DMatrix<f64>,
    master_seed: u64,
) -> Result<EmpiricalReport, SimError> {
    if widths.len() < 3 {
        return Err(SimError::DegenerateWidths);
    }
    let wmin = *widths.iter().min().unwrap();
    let wmax = *widths.iter().max().unwrap();
    if wmin == 0 || wmax < 4 * wmin {
        return Err(SimError::DegenerateWidths);
    }
    let theory_norm = theory.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(theory_norm > 0.0) {
        return Err(SimError::NoTheory("theoretical kernel has zero norm".into()));
    }

    let mut rows = Vec::with_capacity(widths.len());
    for &w in widths {
        // deliberately the same seeds at every width: the counter-based
        // streams then share low-coordinate randomness across widths, so the
        // per-width estimation noise largely cancels in the log-log fit
        let samples: Vec<DMatrix<f64>> = (0..seeds)
            .into_par_iter()
            .map(|s| feature_kernel(tp, spec, w, master_seed.wrapping_add(s as u64)))
            .collect::<Result<_, SimError>>()?;
        let m = theory.nrows();
        let mut mean = DMatrix::zeros(m, m);
        for k in &samples {
            mean += k;
        }
        mean /= seeds as f64;
        let dist = (&mean - theory).iter().map(|v| v * v).sum::<f64>().sqrt() / theory_norm;
        // entrywise standard error of the seed-averaged estimate
        let mut var = DMatrix::zeros(m, m);
        for k in &samples {
            let d = k - &mean;
            for i in 0..m {
                for j in 0..m {
                    var[(i, j)] += d[(i, j)] * d[(i, j)];
                }
            }
        }
        let mut ses: Vec<f64> = var
            .iter()
            .map(|v: &f64| (v / ((seeds.max(2) - 1) as f64 * seeds as f64)).sqrt())
            .collect();
        ses.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ses[ses.len() / 2];
        rows.push(WidthRow { width: w, n_seeds: seeds, frob_rel: dist, entry_std_median: median });
    }

    // least squares on log(dist) vs log(width)
    let xs: Vec<f64> = rows.iter().map(|r| (r.width as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.frob_rel.max(1e-300).ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    if sxx == 0.0 {
        return Err(SimError::DegenerateWidths);
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let resid: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let fit = ym + slope * (x - xm);
            (y - fit) * (y - fit)
        })
        .sum();
    let dof = (xs.len().max(3) - 2) as f64;
    let slope_se = (resid / dof / sxx).sqrt();
    Ok(EmpiricalReport { rows, slope, slope_ci: 2.0 * slope_se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, typecheck};

    fn identity_program() -> (TypedProgram, SamplingSpec) {
        let src = "\
Input g :: G(n)
Input v :: G(n)
x := id(g) :: H(n)
Output v * x
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.set_sigma_in("g", "g", 1.0);
        (tp, spec)
    }

    #[test]
    fn zero_program_has_zero_kernel() {
        let src = "\
Input g :: G(n)
Input v :: G(n)
z := 0 * g :: G(n)
x := id(z) :: H(n)
Output v * x
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.set_sigma_in("g", "g", 1.0);
        let (cov, _) = empirical_kernel(&tp, &spec, 32, 8, 0).unwrap();
        assert!(cov.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn needs_two_seeds() {
        let (tp, spec) = identity_program();
        assert!(matches!(
            empirical_kernel(&tp, &spec, 16, 1, 0),
            Err(SimError::NotEnoughSeeds)
        ));
    }

    #[test]
    fn output_variance_concentration() {
        // v^T g / sqrt(n) with unit variances: K = 1
        let (tp, spec) = identity_program();
        let (cov, se) = empirical_kernel(&tp, &spec, 1024, 200, 11).unwrap();
        assert!((cov[(0, 0)] - 1.0).abs() < 3.0 * se[(0, 0)], "{} {}", cov[(0, 0)], se[(0, 0)]);
    }

    #[test]
    fn equal_widths_rejected() {
        let (tp, spec) = identity_program();
        let theory = DMatrix::from_element(1, 1, 1.0);
        assert!(matches!(
            convergence_study(&tp, &spec, &[64, 64, 64], 10, &theory, 0),
            Err(SimError::DegenerateWidths)
        ));
    }

    #[test]
    fn empirical_moment_of_one() {
        let (tp, spec) = identity_program();
        let psi = crate::nonlin::NonlinRegistry::builtin().get("const1").unwrap().clone();
        let v = empirical_moment(&tp, &spec, 64, 0, &psi, &[]).unwrap();
        assert_eq!(v, 1.0);
    }

    #[test]
    fn empirical_second_moment_concentrates() {
        let (tp, spec) = identity_program();
        let psi = crate::nonlin::NonlinRegistry::builtin().get("square").unwrap().clone();
        let n = 1 << 14;
        let v = empirical_moment(&tp, &spec, n, 5, &psi, &["g"]).unwrap();
        // chi^2 concentration: sd of mean of squares is sqrt(2/n)
        let sd = (2.0 / n as f64).sqrt();
        assert!((v - 1.0).abs() < 3.0 * sd, "{v}");
    }
}
