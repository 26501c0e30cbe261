//! Gaussian expectations of products of nonlinearities over a restriction
//! `(mu|_S, Sigma|_S)`.
//!
//! Dispatch, in order: exact polynomial moments; closed-form pair table
//! (relu, step, erf, erf', exp); the erf/sigmoid family reduced to orthant
//! probabilities under per-factor variance inflation; distribution of sums
//! across the product with symbolic evaluation of every term; whitened
//! kink-split iterated quadrature up to effective rank 3; lattice QMC above.

use crate::linalg::psd_factor;
use crate::nonlin::{Prim, ScalarExpr};
use crate::quad::{expect_iterated_gl, expect_qmc, KinkPlane};
use crate::special::{norm_cdf, norm_pdf};
use crate::vtransform;
use nalgebra::{DMatrix, DVector};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForcePath {
    Auto,
    /// Skip symbolic dispatch; use the iterated quadrature (rank permitting).
    Quadrature,
    /// Skip symbolic dispatch; use QMC regardless of rank.
    Qmc,
}

#[derive(Debug, Clone)]
pub struct ExpectOptions {
    pub gh_nodes: usize,
    pub qmc_points: usize,
    pub orthant_points: usize,
    pub orthant_dim_cap: usize,
    pub seed: u64,
    pub force: ForcePath,
    /// Relative eigenvalue cut when whitening singular restrictions.
    pub eig_cut: f64,
    /// Distribution budget: abandon sum expansion beyond this many terms.
    pub max_expand_terms: usize,
    /// When set, QMC results whose 3-sigma error exceeds this are rejected.
    pub abs_tol: Option<f64>,
}

impl Default for ExpectOptions {
    fn default() -> Self {
        ExpectOptions {
            gh_nodes: 64,
            qmc_points: 1 << 16,
            orthant_points: 1 << 14,
            orthant_dim_cap: 32,
            seed: 0,
            force: ForcePath::Auto,
            eig_cut: 1e-10,
            max_expand_terms: 4096,
            abs_tol: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpectPath {
    Exact,
    Orthant,
    Quadrature,
    Qmc,
}

#[derive(Debug, Clone, Copy)]
pub struct Expectation {
    pub value: f64,
    pub std_error: f64,
    pub path: ExpectPath,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpectError {
    NonFinite,
    DimensionMismatch,
    Orthant(vtransform::OrthantError),
    ToleranceUnattained { achieved: f64, requested: f64 },
}

impl fmt::Display for ExpectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpectError::NonFinite => write!(f, "expectation produced a non-finite value"),
            ExpectError::DimensionMismatch => write!(f, "restriction dimensions disagree"),
            ExpectError::Orthant(e) => write!(f, "orthant evaluation failed: {e}"),
            ExpectError::ToleranceUnattained { achieved, requested } => write!(
                f,
                "achieved error estimate {achieved:.3e} exceeds requested tolerance {requested:.3e}"
            ),
        }
    }
}

impl std::error::Error for ExpectError {}

/// E[prod_i factors[i](Z)] for Z ~ N(mu, sigma). Expressions use `Arg(i)` for
/// coordinate i of the restriction; parameters must already be resolved.
pub fn expectation(
    factors: &[ScalarExpr],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &ExpectOptions,
) -> Result<Expectation, ExpectError> {
    let d = mu.len();
    if sigma.nrows() != d || sigma.ncols() != d {
        return Err(ExpectError::DimensionMismatch);
    }
    // Degenerate coordinates are constants; substituting them early both
    // simplifies dispatch and drops vanishing terms exactly.
    let degenerate: Vec<bool> = (0..d).map(|i| sigma[(i, i)] <= 0.0).collect();
    let prepared: Vec<ScalarExpr> = factors
        .iter()
        .map(|f| {
            f.transform(&mut |e| match e {
                ScalarExpr::Arg(i) if degenerate[*i] => Some(ScalarExpr::Const(mu[*i])),
                _ => None,
            })
            .fold()
        })
        .collect();

    let (scale, flat) = flatten_product(&prepared);
    if scale == 0.0 {
        return Ok(Expectation { value: 0.0, std_error: 0.0, path: ExpectPath::Exact });
    }

    if opts.force == ForcePath::Auto {
        if let Some(r) = symbolic(&flat, mu, sigma, opts)? {
            return Ok(Expectation {
                value: scale * r.value,
                std_error: scale.abs() * r.std_error,
                path: r.path,
            });
        }
        // distribute sums across the product and evaluate terms symbolically
        if let Some(r) = expand_sums(&flat, mu, sigma, opts)? {
            return Ok(Expectation {
                value: scale * r.value,
                std_error: scale.abs() * r.std_error,
                path: r.path,
            });
        }
    }

    numeric(scale, &flat, mu, sigma, opts)
}

/// Split top-level products and negations into (scale, factor list).
fn flatten_product(factors: &[ScalarExpr]) -> (f64, Vec<ScalarExpr>) {
    let mut scale = 1.0;
    let mut out = Vec::new();
    fn push(e: &ScalarExpr, scale: &mut f64, out: &mut Vec<ScalarExpr>) {
        match e {
            ScalarExpr::Const(c) => *scale *= c,
            ScalarExpr::Neg(inner) => {
                *scale = -*scale;
                push(inner, scale, out);
            }
            ScalarExpr::Prod(es) => es.iter().for_each(|x| push(x, scale, out)),
            _ => out.push(e.clone()),
        }
    }
    for f in factors {
        push(f, &mut scale, &mut out);
    }
    (scale, out)
}

/// Affine view of an expression: value = coeffs . z + c.
fn as_affine(e: &ScalarExpr, d: usize) -> Option<(Vec<f64>, f64)> {
    e.as_affine(d)
}

/// Quadratic view: z^T Q z + b . z + c with Q symmetric.
fn as_quadratic(e: &ScalarExpr, d: usize) -> Option<(DMatrix<f64>, Vec<f64>, f64)> {
    if let Some((v, c)) = as_affine(e, d) {
        return Some((DMatrix::zeros(d, d), v, c));
    }
    match e {
        ScalarExpr::Neg(inner) => {
            let (q, b, c) = as_quadratic(inner, d)?;
            Some((-q, b.iter().map(|x| -x).collect(), -c))
        }
        ScalarExpr::Sum(es) => {
            let mut q = DMatrix::zeros(d, d);
            let mut b = vec![0.0; d];
            let mut c = 0.0;
            for x in es {
                let (xq, xb, xc) = as_quadratic(x, d)?;
                q += xq;
                for (bi, xbi) in b.iter_mut().zip(&xb) {
                    *bi += xbi;
                }
                c += xc;
            }
            Some((q, b, c))
        }
        ScalarExpr::Prod(es) => {
            let mut consts = 1.0;
            let mut affines: Vec<(Vec<f64>, f64)> = Vec::new();
            for x in es {
                if let Some(k) = x.fold().as_const() {
                    consts *= k;
                } else if let Some(a) = as_affine(x, d) {
                    affines.push(a);
                } else {
                    return None;
                }
            }
            match affines.len() {
                0 => Some((DMatrix::zeros(d, d), vec![0.0; d], consts)),
                1 => {
                    let (mut v, c) = affines.pop().expect("nonempty");
                    v.iter_mut().for_each(|x| *x *= consts);
                    Some((DMatrix::zeros(d, d), v, c * consts))
                }
                2 => {
                    let (v1, c1) = &affines[0];
                    let (v2, c2) = &affines[1];
                    let mut q = DMatrix::zeros(d, d);
                    for i in 0..d {
                        for j in 0..d {
                            q[(i, j)] = consts * 0.5 * (v1[i] * v2[j] + v1[j] * v2[i]);
                        }
                    }
                    let b: Vec<f64> =
                        (0..d).map(|i| consts * (v1[i] * c2 + v2[i] * c1)).collect();
                    Some((q, b, consts * c1 * c2))
                }
                _ => None,
            }
        }
        ScalarExpr::Div(a, b) => {
            let k = b.fold().as_const()?;
            let (q, bb, c) = as_quadratic(a, d)?;
            Some((q / k, bb.iter().map(|x| x / k).collect(), c / k))
        }
        _ => None,
    }
}

/// Classification of a factor for the closed-form tables.
enum Factor {
    Unary(Prim, Vec<f64>, f64),
    Other,
}

fn classify(e: &ScalarExpr, d: usize) -> Factor {
    if as_affine(e, d).is_some() {
        return Factor::Other;
    }
    if let ScalarExpr::Apply(p, inner) = e {
        // look through a constant positive denominator (layernorm cores)
        if let Some((v, c)) = as_affine(inner, d) {
            return Factor::Unary(*p, v, c);
        }
    }
    Factor::Other
}

fn moments_of_affines(
    fs: &[(&Vec<f64>, f64)],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let t = fs.len();
    let d = mu.len();
    let mut m = DVector::zeros(t);
    let mut c = DMatrix::zeros(t, t);
    for (i, (v, k)) in fs.iter().enumerate() {
        let mut mi = *k;
        for a in 0..d {
            mi += v[a] * mu[a];
        }
        m[i] = mi;
    }
    for i in 0..t {
        for j in 0..=i {
            let mut s = 0.0;
            for a in 0..d {
                for b in 0..d {
                    s += fs[i].0[a] * sigma[(a, b)] * fs[j].0[b];
                }
            }
            c[(i, j)] = s;
            c[(j, i)] = s;
        }
    }
    (m, c)
}

/// Closed-form dispatch. Returns Ok(None) when no rule applies.
fn symbolic(
    flat: &[ScalarExpr],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &ExpectOptions,
) -> Result<Option<Expectation>, ExpectError> {
    let d = mu.len();
    let exact = |v: f64| {
        if v.is_finite() {
            Ok(Some(Expectation { value: v, std_error: 0.0, path: ExpectPath::Exact }))
        } else {
            Err(ExpectError::NonFinite)
        }
    };

    if flat.is_empty() {
        return exact(1.0);
    }

    // polynomial moments up to degree 2
    if flat.len() == 1 {
        if let Some((q, b, c)) = as_quadratic(&flat[0], d) {
            let mut v = c;
            for i in 0..d {
                v += b[i] * mu[i];
                for j in 0..d {
                    v += q[(i, j)] * (sigma[(i, j)] + mu[i] * mu[j]);
                }
            }
            return exact(v);
        }
    }
    if flat.len() == 2 {
        if let (Some((v1, c1)), Some((v2, c2))) =
            (as_affine(&flat[0], d), as_affine(&flat[1], d))
        {
            let (m, c) = moments_of_affines(&[(&v1, c1), (&v2, c2)], mu, sigma);
            return exact(c[(0, 1)] + m[0] * m[1]);
        }
    }

    let classified: Vec<Factor> = flat.iter().map(|e| classify(e, d)).collect();

    // all-exponential products: the Gaussian MGF is exact for any means
    if classified.iter().all(|f| matches!(f, Factor::Unary(Prim::Exp { .. }, _, _))) {
        let mut w = vec![0.0; d];
        let mut shift = 0.0;
        for f in &classified {
            if let Factor::Unary(Prim::Exp { sigma: s }, v, c) = f {
                for (wa, va) in w.iter_mut().zip(v) {
                    *wa += va / s;
                }
                shift += c / s;
            }
        }
        let mut e = shift;
        for i in 0..d {
            e += w[i] * mu[i];
            for j in 0..d {
                e += 0.5 * w[i] * sigma[(i, j)] * w[j];
            }
        }
        return exact(e.exp());
    }

    // pair table over single unary factors with centered arguments
    if classified.len() == 2 {
        if let (Factor::Unary(p1, v1, c1), Factor::Unary(p2, v2, c2)) =
            (&classified[0], &classified[1])
        {
            let (m, c) = moments_of_affines(&[(v1, *c1), (v2, *c2)], mu, sigma);
            let centered = m[0] == 0.0 && m[1] == 0.0;
            if centered {
                let pair = match (p1, p2) {
                    (Prim::Relu, Prim::Relu) => {
                        Some(vtransform::vrelu_pair(c[(0, 0)], c[(0, 1)], c[(1, 1)]))
                    }
                    (Prim::Step, Prim::Step) => {
                        Some(vtransform::vrelu_prime_pair(c[(0, 0)], c[(0, 1)], c[(1, 1)]))
                    }
                    (Prim::ErfPrime, Prim::ErfPrime) => {
                        Some(vtransform::verf_prime_pair(c[(0, 0)], c[(0, 1)], c[(1, 1)]))
                    }
                    _ => None,
                };
                if let Some(Ok(v)) = pair {
                    return exact(v);
                }
            }
        }
    }

    // erf / gate family: write every factor as `a + b * gate(x_i)` where
    // gate is the half-indicator (sigma_erf carries the I/2 smoothing, step
    // none; erf = 2 sigma - 1, sign = 2 step - 1). Expanding the product
    // leaves one orthant probability per surviving term: gate factors force
    // their coordinate into the orthant (a = 0), so the term count is
    // 2^(#erf + #sign), not 2^T.
    let mut gate_forms: Vec<(f64, f64, f64)> = Vec::new(); // (a, b, inflation)
    let mut aff_views: Vec<(&Vec<f64>, f64)> = Vec::new();
    let mut family_ok = true;
    for f in &classified {
        match f {
            Factor::Unary(Prim::Erf, v, c) => {
                gate_forms.push((-1.0, 2.0, 0.5));
                aff_views.push((v, *c));
            }
            Factor::Unary(Prim::Sign, v, c) => {
                gate_forms.push((-1.0, 2.0, 0.0));
                aff_views.push((v, *c));
            }
            Factor::Unary(Prim::SigmoidErf, v, c) => {
                gate_forms.push((0.0, 1.0, 0.5));
                aff_views.push((v, *c));
            }
            Factor::Unary(Prim::Step, v, c) => {
                gate_forms.push((0.0, 1.0, 0.0));
                aff_views.push((v, *c));
            }
            _ => {
                family_ok = false;
                break;
            }
        }
    }
    if family_ok && !gate_forms.is_empty() && gate_forms.len() <= 24 {
        let t = gate_forms.len();
        let (m, mut c) = moments_of_affines(&aff_views, mu, sigma);
        for (i, (_, _, infl)) in gate_forms.iter().enumerate() {
            c[(i, i)] += infl;
        }
        let free: Vec<usize> =
            (0..t).filter(|&i| gate_forms[i].0 != 0.0).collect();
        if free.len() > 16 {
            return Ok(None); // too many sign-type factors to expand
        }
        let mut total = 0.0;
        let mut err_sq = 0.0;
        for mask in 0u32..(1 << free.len()) {
            // subset = all forced gates plus the chosen free ones
            let mut coef = 1.0;
            let mut subset: Vec<usize> = Vec::with_capacity(t);
            let mut fi = 0;
            for i in 0..t {
                let (a, b, _) = gate_forms[i];
                if a == 0.0 {
                    coef *= b;
                    subset.push(i);
                } else {
                    if mask >> fi & 1 == 1 {
                        coef *= b;
                        subset.push(i);
                    } else {
                        coef *= a;
                    }
                    fi += 1;
                }
            }
            if coef == 0.0 {
                continue;
            }
            if subset.is_empty() {
                total += coef;
                continue;
            }
            let sm = DVector::from_iterator(subset.len(), subset.iter().map(|&i| m[i]));
            let sc = DMatrix::from_fn(subset.len(), subset.len(), |r, q2| {
                c[(subset[r], subset[q2])]
            });
            let mut q = vtransform::OrthantQuery::new(sm, sc);
            q.points = opts.orthant_points;
            q.seed = opts.seed ^ mask as u64;
            q.dim_cap = opts.orthant_dim_cap;
            let (v, se) = vtransform::orthant_probability(&q).map_err(ExpectError::Orthant)?;
            total += coef * v;
            err_sq += (coef * se) * (coef * se);
        }
        if !total.is_finite() {
            return Err(ExpectError::NonFinite);
        }
        return Ok(Some(Expectation {
            value: total,
            std_error: err_sq.sqrt(),
            path: ExpectPath::Orthant,
        }));
    }

    // single unary factor with a general mean
    if classified.len() == 1 {
        if let Factor::Unary(p, v, c) = &classified[0] {
            let (m, cc) = moments_of_affines(&[(v, *c)], mu, sigma);
            let (m, var) = (m[0], cc[(0, 0)].max(0.0));
            let s = var.sqrt();
            let val = match p {
                Prim::Relu => {
                    if s == 0.0 {
                        m.max(0.0)
                    } else {
                        m * norm_cdf(m / s) + s * norm_pdf(m / s)
                    }
                }
                Prim::Abs => {
                    if s == 0.0 {
                        m.abs()
                    } else {
                        m * (2.0 * norm_cdf(m / s) - 1.0) + 2.0 * s * norm_pdf(m / s)
                    }
                }
                Prim::Erf => libm::erf(m / (1.0 + 2.0 * var).sqrt()),
                Prim::SigmoidErf => norm_cdf(m / (0.5 + var).sqrt()),
                Prim::ErfPrime => {
                    // E 2/sqrt(pi) exp(-(x)^2): Gaussian integral in closed form
                    2.0 / (std::f64::consts::PI * (1.0 + 2.0 * var)).sqrt()
                        * (-m * m / (1.0 + 2.0 * var)).exp()
                }
                _ => return Ok(None),
            };
            return exact(val);
        }
    }

    Ok(None)
}

/// Distribute Sum factors across the product; succeed only when every term
/// evaluates through the symbolic rules.
fn expand_sums(
    flat: &[ScalarExpr],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &ExpectOptions,
) -> Result<Option<Expectation>, ExpectError> {
    let mut n_terms: usize = 1;
    let mut any_sum = false;
    for f in flat {
        if let ScalarExpr::Sum(es) = f {
            any_sum = true;
            n_terms = n_terms.saturating_mul(es.len());
            if n_terms > opts.max_expand_terms {
                return Ok(None);
            }
        }
    }
    if !any_sum {
        return Ok(None);
    }

    let mut total = 0.0;
    let mut err_sq = 0.0;
    let mut path = ExpectPath::Exact;
    let mut idx = vec![0usize; flat.len()];
    loop {
        // assemble one term
        let mut term: Vec<ScalarExpr> = Vec::with_capacity(flat.len());
        for (f, &i) in flat.iter().zip(&idx) {
            match f {
                ScalarExpr::Sum(es) => term.push(es[i].clone()),
                other => term.push(other.clone()),
            }
        }
        let (scale, term_flat) = flatten_product(&term);
        if scale != 0.0 {
            match symbolic(&term_flat, mu, sigma, opts)? {
                Some(e) => {
                    total += scale * e.value;
                    err_sq += (scale * e.std_error) * (scale * e.std_error);
                    if e.path != ExpectPath::Exact {
                        path = ExpectPath::Orthant;
                    }
                }
                None => return Ok(None),
            }
        }
        // advance the multi-index
        let mut done = true;
        for (k, f) in flat.iter().enumerate() {
            let width = match f {
                ScalarExpr::Sum(es) => es.len(),
                _ => 1,
            };
            idx[k] += 1;
            if idx[k] < width {
                done = false;
                break;
            }
            idx[k] = 0;
        }
        if done {
            break;
        }
    }
    if !total.is_finite() {
        return Err(ExpectError::NonFinite);
    }
    Ok(Some(Expectation { value: total, std_error: err_sq.sqrt(), path }))
}

fn numeric(
    scale: f64,
    flat: &[ScalarExpr],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &ExpectOptions,
) -> Result<Expectation, ExpectError> {
    let d = mu.len();
    let l = psd_factor(sigma, opts.eig_cut);
    let rank = l.ncols();

    let mut eval = |z: &[f64]| {
        let mut acc = 1.0;
        for f in flat {
            acc *= f.eval(z, &[]);
        }
        acc
    };

    if rank == 0 {
        let v = scale * eval(mu.as_slice());
        return if v.is_finite() {
            Ok(Expectation { value: v, std_error: 0.0, path: ExpectPath::Exact })
        } else {
            Err(ExpectError::NonFinite)
        };
    }

    let use_qmc = opts.force == ForcePath::Qmc || (opts.force != ForcePath::Quadrature && rank > 3);
    if !use_qmc && rank <= 3 {
        // collect kink planes in whitened coordinates
        let mut kz: Vec<(Vec<f64>, f64)> = Vec::new();
        for f in flat {
            f.kink_functionals(d, &mut kz);
        }
        let kinks: Vec<KinkPlane> = kz
            .iter()
            .map(|(v, c)| {
                let mut constant = *c;
                for a in 0..d {
                    constant += v[a] * mu[a];
                }
                let coeffs: Vec<f64> =
                    (0..rank).map(|r| (0..d).map(|a| v[a] * l[(a, r)]).sum()).collect();
                KinkPlane { coeffs, constant }
            })
            .collect();
        let v = scale * expect_iterated_gl(&l, mu, &kinks, opts.gh_nodes, &mut eval);
        if !v.is_finite() {
            return Err(ExpectError::NonFinite);
        }
        return Ok(Expectation { value: v, std_error: 0.0, path: ExpectPath::Quadrature });
    }

    let (v, se) = expect_qmc(&l, mu, opts.qmc_points, 8, opts.seed, &mut eval);
    let (v, se) = (scale * v, scale.abs() * se);
    if !v.is_finite() {
        return Err(ExpectError::NonFinite);
    }
    if let Some(tol) = opts.abs_tol {
        if 3.0 * se > tol {
            return Err(ExpectError::ToleranceUnattained { achieved: 3.0 * se, requested: tol });
        }
    }
    Ok(Expectation { value: v, std_error: se, path: ExpectPath::Qmc })
}
