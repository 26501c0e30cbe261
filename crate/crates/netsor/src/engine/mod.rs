//! The symbolic interpreter: computes the infinite-width limit mean and
//! covariance over G-vars of a typed program, the limits of its C-vars, and
//! the GP kernel over its outputs.

mod expectation;

pub use expectation::{expectation, ExpectError, ExpectOptions, Expectation, ExpectPath, ForcePath};

use crate::lang::{Dialect, Expr, TypeKind, TypedProgram};
use crate::linalg::{is_psd, sym_condition};
use crate::nonlin::{arg, NonlinSpec, ScalarExpr};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Sampling data for a program: per-A-var weight variance, input mean and
/// covariance, input C-var limits, and readout variances.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// sigma_W^2 per A-var.
    #[serde(default)]
    pub avar_variance: BTreeMap<String, f64>,
    /// Mean per input G-var; absent entries are 0.
    #[serde(default)]
    pub mu_in: BTreeMap<String, f64>,
    /// Symmetric covariance entries over input G-vars; absent pairs are 0.
    #[serde(default)]
    pub sigma_in: Vec<(String, String, f64)>,
    /// Limits of input C-vars.
    #[serde(default)]
    pub theta_in: BTreeMap<String, f64>,
    /// sigma_v^2 per readout var; absent entries are 1.
    #[serde(default)]
    pub sigma_v: BTreeMap<String, f64>,
}

impl SamplingSpec {
    pub fn set_sigma_in(&mut self, a: impl Into<String>, b: impl Into<String>, v: f64) {
        self.sigma_in.push((a.into(), b.into(), v));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sampling spec serializes")
    }

    pub fn from_json(text: &str) -> Result<SamplingSpec, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// The computed limit: mean and covariance over all G-vars (program order)
/// and the limit value of every C-var.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub gvars: Vec<String>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub cvar_limits: Vec<(String, f64)>,
    /// Non-fatal warnings (rank-stability diagnostics).
    pub diagnostics: Vec<String>,
}

impl KernelTable {
    pub fn gvar_index(&self, name: &str) -> Option<usize> {
        self.gvars.iter().position(|g| g == name)
    }

    pub fn mu_of(&self, name: &str) -> Option<f64> {
        self.gvar_index(name).map(|i| self.mu[i])
    }

    pub fn sigma_of(&self, a: &str, b: &str) -> Option<f64> {
        match (self.gvar_index(a), self.gvar_index(b)) {
            (Some(i), Some(j)) => Some(self.sigma[(i, j)]),
            _ => None,
        }
    }

    pub fn cvar_limit(&self, name: &str) -> Option<f64> {
        self.cvar_limits.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Json<'a> {
            gvars: &'a [String],
            mu: Vec<f64>,
            sigma_row_major: Vec<f64>,
            cvar_limits: &'a [(String, f64)],
            diagnostics: &'a [String],
        }
        let n = self.gvars.len();
        let mut sigma_row_major = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                sigma_row_major.push(self.sigma[(i, j)]);
            }
        }
        serde_json::to_string_pretty(&Json {
            gvars: &self.gvars,
            mu: self.mu.iter().cloned().collect(),
            sigma_row_major,
            cvar_limits: &self.cvar_limits,
            diagnostics: &self.diagnostics,
        })
        .expect("kernel table serializes")
    }
}

/// The GP kernel over program outputs, with the readout grouping that makes
/// cross-group blocks exactly zero.
#[derive(Debug, Clone)]
pub struct OutputKernel {
    pub labels: Vec<String>,
    pub readouts: Vec<String>,
    pub k: DMatrix<f64>,
}

impl OutputKernel {
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Json<'a> {
            labels: &'a [String],
            readouts: &'a [String],
            k_row_major: Vec<f64>,
        }
        let n = self.labels.len();
        let mut k_row_major = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                k_row_major.push(self.k[(i, j)]);
            }
        }
        serde_json::to_string_pretty(&Json {
            labels: &self.labels,
            readouts: &self.readouts,
            k_row_major,
        })
        .expect("output kernel serializes")
    }

    /// CSV with a header row of output labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.labels.join(","));
        out.push('\n');
        for i in 0..self.k.nrows() {
            let row: Vec<String> = (0..self.k.ncols()).map(|j| format!("{}", self.k[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum EngineError {
    /// A nonlinearity consumes H-vars: run `unwind` first.
    NeedsUnwind { statement: String },
    MissingAvarVariance { name: String },
    MissingInputCvar { name: String },
    SigmaInNotPsd,
    PsdViolation { min_eig: f64, scale: f64 },
    CauchySchwarz { a: String, b: String, excess: f64 },
    Expect { context: String, source: ExpectError },
    /// A parametrized nonlinearity hit an invalid limit parameter (for
    /// example a vanishing layernorm variance).
    DegenerateParameter { statement: String },
}

impl fmt::Display for EngineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EngineError::NeedsUnwind { statement } => {
                write!(f, "`{statement}` applies a nonlinearity to an H-var; unwind the program first")
            }
            EngineError::MissingAvarVariance { name } => {
                write!(f, "sampling spec has no variance for A-var `{name}`")
            }
            EngineError::MissingInputCvar { name } => {
                write!(f, "sampling spec has no limit for input C-var `{name}`")
            }
            EngineError::SigmaInNotPsd => write!(f, "input covariance is not PSD within tolerance"),
            EngineError::PsdViolation { min_eig, scale } => {
                write!(f, "computed covariance violates PSD: min eigenvalue {min_eig:.3e} at scale {scale:.3e}")
            }
            EngineError::CauchySchwarz { a, b, excess } => {
                write!(f, "Cauchy-Schwarz violated for ({a}, {b}) by {excess:.3e}")
            }
            EngineError::Expect { context, source } => write!(f, "{context}: {source}"),
            EngineError::DegenerateParameter { statement } => {
                write!(f, "`{statement}`: degenerate limit parameter (division by a vanishing limit)")
            }
        }
    }
}

impl std::error::Error for EngineError {}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Relative PSD tolerance for validating covariances.
    pub tol_psd: f64,
    pub expect: ExpectOptions,
}

impl Default for EngineOptions {
    fn default() -> Self {
        EngineOptions { tol_psd: 1e-8, expect: ExpectOptions::default() }
    }
}

/// A vector variable viewed as a scalar function of G-vars.
#[derive(Debug, Clone)]
struct Unwound {
    expr: ScalarExpr,
    gvars: Vec<String>,
    cvars: Vec<String>,
}

fn unwound_of(tp: &TypedProgram, name: &str) -> Result<Unwound, EngineError> {
    match tp.kind(name) {
        Some(TypeKind::G) => {
            Ok(Unwound { expr: arg(0), gvars: vec![name.to_string()], cvars: vec![] })
        }
        Some(TypeKind::H) => {
            let stmt = tp.stmt(name).expect("typed");
            match &stmt.expr {
                Expr::Nonlin { name: fname, gvars, cvars } => {
                    if gvars.iter().any(|v| tp.kind(v) == Some(TypeKind::H)) {
                        return Err(EngineError::NeedsUnwind { statement: name.to_string() });
                    }
                    let spec = tp.program.nonlins.get(fname).expect("typed");
                    Ok(Unwound {
                        expr: spec.expr.clone(),
                        gvars: gvars.clone(),
                        cvars: cvars.clone(),
                    })
                }
                _ => Err(EngineError::NeedsUnwind { statement: name.to_string() }),
            }
        }
        _ => Err(EngineError::NeedsUnwind { statement: name.to_string() }),
    }
}

/// Shared evaluation context: computed values plus the expectation memo.
struct Ctx<'a> {
    opts: &'a EngineOptions,
    gvar_index: HashMap<String, usize>,
    mu: Vec<f64>,
    sigma: DMatrix<f64>,
    cvars: HashMap<String, f64>,
    cache: HashMap<Vec<u8>, Expectation>,
    diagnostics: Vec<String>,
    /// Largest standard error reported by a stochastic expectation, scaled
    /// into Sigma units; widens the final PSD tolerance.
    max_se: f64,
}

impl<'a> Ctx<'a> {
    /// Resolve an unwound nonlinearity into a restriction-space expression
    /// plus the set of gvar indices it touches. The bool marks parametrized
    /// nonlinearities (rank-stability diagnostics apply to those).
    fn resolve(
        &self,
        u: &Unwound,
        context: &str,
    ) -> Result<(ScalarExpr, Vec<usize>, bool), EngineError> {
        let params: Vec<f64> = u
            .cvars
            .iter()
            .map(|c| {
                self.cvars.get(c).copied().ok_or_else(|| EngineError::Expect {
                    context: format!("{context}: C-var `{c}` not yet resolved"),
                    source: ExpectError::NonFinite,
                })
            })
            .collect::<Result<_, _>>()?;
        let idx: Vec<usize> = u.gvars.iter().map(|g| self.gvar_index[g]).collect();
        Ok((u.expr.resolve_params(&params), idx, !u.cvars.is_empty()))
    }

    /// E[prod of the given restriction-space functions], memoized.
    fn product_expectation(
        &mut self,
        parts: &[(ScalarExpr, Vec<usize>)],
        parametrized: bool,
        context: &str,
    ) -> Result<Expectation, EngineError> {
        // union of coordinates, sorted for a canonical restriction
        let mut coords: Vec<usize> = parts.iter().flat_map(|(_, idx)| idx.iter().copied()).collect();
        coords.sort_unstable();
        coords.dedup();
        let remapped: Vec<ScalarExpr> = parts
            .iter()
            .map(|(e, idx)| {
                let map: Vec<usize> =
                    idx.iter().map(|i| coords.binary_search(i).unwrap()).collect();
                e.remap_args(&map)
            })
            .collect();
        let mu = DVector::from_iterator(coords.len(), coords.iter().map(|&i| self.mu[i]));
        let sigma =
            DMatrix::from_fn(coords.len(), coords.len(), |r, c| self.sigma[(coords[r], coords[c])]);

        let mut key = Vec::new();
        for e in &remapped {
            e.encode(&mut key);
            key.push(0xFE);
        }
        for v in mu.iter() {
            key.extend(v.to_bits().to_le_bytes());
        }
        for v in sigma.iter() {
            key.extend(v.to_bits().to_le_bytes());
        }
        if let Some(hit) = self.cache.get(&key) {
            return Ok(*hit);
        }

        if parametrized {
            // restrict to coordinates with positive variance; exact-zero
            // directions are substituted as constants and are not a rank drop
            let live: Vec<usize> =
                (0..sigma.nrows()).filter(|&i| sigma[(i, i)] > 0.0).collect();
            if live.len() >= 2 {
                let sub = DMatrix::from_fn(live.len(), live.len(), |r, c| {
                    sigma[(live[r], live[c])]
                });
                let cond = sym_condition(&sub);
                if cond > 1e12 {
                    self.diagnostics.push(format!(
                        "{context}: restriction condition number {cond:.2e} exceeds 1e12 while \
                         a parametrized nonlinearity is in scope; the rank-stability assumption \
                         may fail"
                    ));
                }
            }
        }

        let result = expectation(&remapped, &mu, &sigma, &self.opts.expect)
            .map_err(|source| EngineError::Expect { context: context.to_string(), source })?;
        self.cache.insert(key, result);
        Ok(result)
    }
}

/// Compute the limit (mu, Sigma) over all G-vars and the limit of every
/// C-var, following the recursion keyed on how each G-var was introduced.
pub fn compute_mu_sigma(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    opts: &EngineOptions,
) -> Result<KernelTable, EngineError> {
    if matches!(tp.dialect, Dialect::NetsorCircle | Dialect::NetsorCirclePlus) {
        let bad = tp
            .program
            .statements
            .iter()
            .find(|s| match &s.expr {
                Expr::Nonlin { gvars, .. } => {
                    gvars.iter().any(|v| tp.kind(v) == Some(TypeKind::H))
                }
                _ => false,
            })
            .map(|s| s.target.clone())
            .unwrap_or_default();
        return Err(EngineError::NeedsUnwind { statement: bad });
    }

    let gvars: Vec<String> = tp.gvars().iter().map(|s| s.to_string()).collect();
    let n = gvars.len();
    let gvar_index: HashMap<String, usize> =
        gvars.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
    let readouts: std::collections::HashSet<&str> =
        tp.outputs().iter().map(|o| o.readout.as_str()).collect();

    // symmetric lookup for input covariance entries
    let mut sigma_in: HashMap<(String, String), f64> = HashMap::new();
    for (a, b, v) in &spec.sigma_in {
        sigma_in.insert((a.clone(), b.clone()), *v);
        sigma_in.insert((b.clone(), a.clone()), *v);
    }

    let has_params = tp.program.statements.iter().any(|s| match &s.expr {
        Expr::Nonlin { cvars, .. } => !cvars.is_empty(),
        _ => false,
    });

    let mut ctx = Ctx {
        opts,
        gvar_index,
        mu: vec![0.0; n],
        sigma: DMatrix::zeros(n, n),
        cvars: HashMap::new(),
        cache: HashMap::new(),
        diagnostics: Vec::new(),
        max_se: 0.0,
    };

    // validate A-var variances and input C-vars up front
    for s in &tp.program.statements {
        match &s.expr {
            Expr::MatMul { avar, .. } => {
                if !spec.avar_variance.contains_key(avar) {
                    return Err(EngineError::MissingAvarVariance { name: avar.clone() });
                }
            }
            Expr::Input if s.ty.kind == TypeKind::C => {
                if !spec.theta_in.contains_key(&s.target) {
                    return Err(EngineError::MissingInputCvar { name: s.target.clone() });
                }
            }
            _ => {}
        }
    }

    // validate Sigma^in over the non-readout input G-vars
    {
        let inputs: Vec<&str> = tp
            .program
            .statements
            .iter()
            .filter(|s| {
                s.expr == Expr::Input
                    && s.ty.kind == TypeKind::G
                    && !readouts.contains(s.target.as_str())
            })
            .map(|s| s.target.as_str())
            .collect();
        let m = DMatrix::from_fn(inputs.len(), inputs.len(), |i, j| {
            *sigma_in.get(&(inputs[i].to_string(), inputs[j].to_string())).unwrap_or(&0.0)
        });
        if !is_psd(&m, opts.tol_psd) {
            return Err(EngineError::SigmaInNotPsd);
        }
    }

    // main recursion, statement by statement
    for s in &tp.program.statements {
        match (&s.expr, s.ty.kind) {
            (Expr::Input, TypeKind::G) => {
                let i = ctx.gvar_index[&s.target];
                if readouts.contains(s.target.as_str()) {
                    ctx.mu[i] = 0.0;
                    ctx.sigma[(i, i)] = *spec.sigma_v.get(&s.target).unwrap_or(&1.0);
                    // independent of everything else: row stays zero
                } else {
                    ctx.mu[i] = *spec.mu_in.get(&s.target).unwrap_or(&0.0);
                    for j in 0..=i {
                        let other = &gvars[j];
                        let v = match &tp.stmt(other).expect("typed").expr {
                            // an earlier linear combination expands through
                            // the entries of this row already computed
                            Expr::LinComb { terms } if j < i => terms
                                .iter()
                                .map(|(c, y)| c * ctx.sigma[(i, ctx.gvar_index[y])])
                                .sum(),
                            Expr::Input if !readouts.contains(other.as_str()) => {
                                *sigma_in.get(&(s.target.clone(), other.clone())).unwrap_or(&0.0)
                            }
                            _ => 0.0,
                        };
                        ctx.sigma[(i, j)] = v;
                        ctx.sigma[(j, i)] = v;
                    }
                }
            }
            (Expr::Input, _) => {
                if s.ty.kind == TypeKind::C {
                    ctx.cvars.insert(s.target.clone(), spec.theta_in[&s.target]);
                }
            }
            (Expr::LinComb { terms }, _) => {
                let i = ctx.gvar_index[&s.target];
                ctx.mu[i] = terms.iter().map(|(c, v)| c * ctx.mu[ctx.gvar_index[v]]).sum();
                for j in 0..=i {
                    let v: f64 = if j == i {
                        // expand both sides
                        terms
                            .iter()
                            .map(|(c1, v1)| {
                                let r1 = ctx.gvar_index[v1];
                                terms
                                    .iter()
                                    .map(|(c2, v2)| c1 * c2 * ctx.sigma[(r1, ctx.gvar_index[v2])])
                                    .sum::<f64>()
                            })
                            .sum()
                    } else {
                        terms
                            .iter()
                            .map(|(c, v)| c * ctx.sigma[(ctx.gvar_index[v], j)])
                            .sum()
                    };
                    ctx.sigma[(i, j)] = v;
                    ctx.sigma[(j, i)] = v;
                }
            }
            (Expr::MatMul { avar, hvar }, _) => {
                let i = ctx.gvar_index[&s.target];
                ctx.mu[i] = 0.0;
                let sw2 = spec.avar_variance[avar];
                let u_i = unwound_of(tp, hvar)?;
                let (expr_i, idx_i, par_i) = ctx.resolve(&u_i, &s.target)?;
                // walk earlier G-vars in order so LinComb expansions can use
                // entries of this row already computed
                for j in 0..i {
                    let prior = tp.stmt(&gvars[j]).expect("typed");
                    let v = match &prior.expr {
                        Expr::LinComb { terms } => terms
                            .iter()
                            .map(|(c, y)| c * ctx.sigma[(i, ctx.gvar_index[y])])
                            .sum(),
                        Expr::MatMul { avar: a2, hvar: h2 } if a2 == avar => {
                            let u_j = unwound_of(tp, h2)?;
                            let (expr_j, idx_j, par_j) = ctx.resolve(&u_j, &prior.target)?;
                            let e = ctx.product_expectation(
                                &[(expr_i.clone(), idx_i.clone()), (expr_j, idx_j)],
                                par_i || par_j,
                                &format!("Sigma({}, {})", s.target, prior.target),
                            )?;
                            ctx.max_se = ctx.max_se.max(sw2 * e.std_error);
                            sw2 * e.value
                        }
                        _ => 0.0,
                    };
                    ctx.sigma[(i, j)] = v;
                    ctx.sigma[(j, i)] = v;
                }
                let e = ctx.product_expectation(
                    &[(expr_i.clone(), idx_i.clone()), (expr_i.clone(), idx_i.clone())],
                    par_i,
                    &format!("Sigma({0}, {0})", s.target),
                )?;
                ctx.max_se = ctx.max_se.max(sw2 * e.std_error);
                ctx.sigma[(i, i)] = sw2 * e.value;
            }
            (Expr::Moment { name, gvars: gs, cvars: cs }, _) => {
                let spec_fn = tp.program.nonlins.get(name).expect("typed");
                let u = Unwound {
                    expr: spec_fn.expr.clone(),
                    gvars: gs.clone(),
                    cvars: cs.clone(),
                };
                let (expr, idx, par) = ctx.resolve(&u, &s.target)?;
                let e = ctx
                    .product_expectation(&[(expr, idx)], par, &format!("limit of `{}`", s.target))
                    .map_err(|err| match err {
                        EngineError::Expect { source: ExpectError::NonFinite, .. } => {
                            EngineError::DegenerateParameter { statement: s.target.clone() }
                        }
                        other => other,
                    })?;
                ctx.cvars.insert(s.target.clone(), e.value);
            }
            (Expr::Nonlin { .. }, _) => {}
        }
    }

    // rank-stability diagnostic: per A-var, the Gram matrix of the H-vars it
    // multiplies is the Sigma block over its images divided by sigma_W^2
    if has_params {
        for avar in tp.avars() {
            let images: Vec<usize> = tp
                .program
                .statements
                .iter()
                .filter(|s| matches!(&s.expr, Expr::MatMul { avar: a, .. } if a == avar))
                .map(|s| ctx.gvar_index[&s.target])
                .collect();
            if images.len() >= 2 {
                let gram = DMatrix::from_fn(images.len(), images.len(), |i, j| {
                    ctx.sigma[(images[i], images[j])]
                });
                let cond = sym_condition(&gram);
                if cond > 1e12 {
                    ctx.diagnostics.push(format!(
                        "A-var `{avar}`: limit Gram matrix of multiplied H-vars has condition \
                         number {cond:.2e} > 1e12; the rank-stability assumption may fail"
                    ));
                }
            }
        }
    }

    // final validation; stochastic (orthant / QMC) entries are allowed their
    // reported uncertainty on top of the deterministic tolerance
    let scale = ctx.sigma.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let noise_allowance = 4.0 * ctx.max_se * n as f64;
    {
        let (vals, _) = crate::linalg::sym_eig_psd(&ctx.sigma);
        let min_eig = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < -(opts.tol_psd * scale.max(1e-300) + noise_allowance) {
            return Err(EngineError::PsdViolation { min_eig, scale });
        }
    }
    for i in 0..n {
        for j in 0..i {
            let bound = (ctx.sigma[(i, i)] * ctx.sigma[(j, j)]).max(0.0).sqrt();
            let excess = ctx.sigma[(i, j)].abs() - bound;
            if excess > 1e-9 * scale.max(1.0) + noise_allowance {
                return Err(EngineError::CauchySchwarz {
                    a: gvars[i].clone(),
                    b: gvars[j].clone(),
                    excess,
                });
            }
        }
    }

    let cvar_limits: Vec<(String, f64)> = tp
        .program
        .statements
        .iter()
        .filter(|s| s.ty.kind == TypeKind::C)
        .map(|s| (s.target.clone(), ctx.cvars[&s.target]))
        .collect();

    Ok(KernelTable {
        gvars,
        mu: DVector::from_vec(ctx.mu),
        sigma: ctx.sigma,
        cvar_limits,
        diagnostics: ctx.diagnostics,
    })
}

/// The limit of a single Moment statement given an already-computed table.
pub fn cvar_limit(kt: &KernelTable, tp: &TypedProgram, moment: &str, opts: &EngineOptions) -> Result<f64, EngineError> {
    let stmt = tp.stmt(moment).ok_or_else(|| EngineError::DegenerateParameter {
        statement: moment.to_string(),
    })?;
    let (name, gs, cs) = match &stmt.expr {
        Expr::Moment { name, gvars, cvars } => (name, gvars, cvars),
        _ => return Err(EngineError::DegenerateParameter { statement: moment.to_string() }),
    };
    let spec_fn = tp.program.nonlins.get(name).expect("typed");
    let params: Vec<f64> = cs
        .iter()
        .map(|c| {
            kt.cvar_limit(c).ok_or_else(|| EngineError::DegenerateParameter {
                statement: moment.to_string(),
            })
        })
        .collect::<Result<_, _>>()?;
    let idx: Vec<usize> = gs.iter().map(|g| kt.gvar_index(g).expect("typed")).collect();
    let coords: Vec<usize> = {
        let mut c = idx.clone();
        c.sort_unstable();
        c.dedup();
        c
    };
    let map: Vec<usize> = idx.iter().map(|i| coords.binary_search(i).unwrap()).collect();
    let expr = spec_fn.expr.resolve_params(&params).remap_args(&map);
    let mu = DVector::from_iterator(coords.len(), coords.iter().map(|&i| kt.mu[i]));
    let sigma =
        DMatrix::from_fn(coords.len(), coords.len(), |r, c| kt.sigma[(coords[r], coords[c])]);
    let e = expectation(&[expr], &mu, &sigma, &opts.expect).map_err(|source| {
        EngineError::Expect { context: format!("limit of `{moment}`"), source }
    })?;
    if !e.value.is_finite() {
        return Err(EngineError::DegenerateParameter { statement: moment.to_string() });
    }
    Ok(e.value)
}

/// Public form of the engine's Gaussian product expectation: applications of
/// named nonlinearities over coordinate subsets of a restriction.
pub fn gaussian_expectation(
    fns: &[(&NonlinSpec, &[usize], &[f64])],
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    opts: &ExpectOptions,
) -> Result<Expectation, ExpectError> {
    let exprs: Vec<ScalarExpr> = fns
        .iter()
        .map(|(spec, idx, params)| spec.expr.resolve_params(params).remap_args(idx))
        .collect();
    expectation(&exprs, mu, sigma, opts)
}

/// The GP kernel over the program outputs: within a readout group,
/// `K_ij = sigma_v^2 E[phi_i(Z) phi_j(Z)]`; across groups, exactly zero.
pub fn output_kernel(
    kt: &KernelTable,
    tp: &TypedProgram,
    sigma_v: &BTreeMap<String, f64>,
    opts: &EngineOptions,
) -> Result<OutputKernel, EngineError> {
    let outs = tp.outputs();
    let mut unwounds = Vec::with_capacity(outs.len());
    for o in outs {
        let u = unwound_of(tp, &o.hvar)?;
        let params: Vec<f64> = u
            .cvars
            .iter()
            .map(|c| {
                kt.cvar_limit(c).ok_or_else(|| EngineError::DegenerateParameter {
                    statement: o.hvar.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        let idx: Vec<usize> = u.gvars.iter().map(|g| kt.gvar_index(g).expect("typed")).collect();
        unwounds.push((u.expr.resolve_params(&params), idx));
    }

    let m = outs.len();
    let mut k = DMatrix::zeros(m, m);
    let mut max_se = 0.0_f64;
    let mut cache: HashMap<Vec<u8>, f64> = HashMap::new();
    for i in 0..m {
        for j in 0..=i {
            if outs[i].readout != outs[j].readout {
                continue; // independent readouts: exactly zero
            }
            let sv = *sigma_v.get(&outs[i].readout).unwrap_or(&1.0);
            let mut coords: Vec<usize> =
                unwounds[i].1.iter().chain(unwounds[j].1.iter()).copied().collect();
            coords.sort_unstable();
            coords.dedup();
            let remap = |(e, idx): &(ScalarExpr, Vec<usize>)| {
                let map: Vec<usize> =
                    idx.iter().map(|v| coords.binary_search(v).unwrap()).collect();
                e.remap_args(&map)
            };
            let e1 = remap(&unwounds[i]);
            let e2 = remap(&unwounds[j]);
            let mu = DVector::from_iterator(coords.len(), coords.iter().map(|&v| kt.mu[v]));
            let sigma = DMatrix::from_fn(coords.len(), coords.len(), |r, c| {
                kt.sigma[(coords[r], coords[c])]
            });
            let mut key = Vec::new();
            e1.encode(&mut key);
            key.push(0xFE);
            e2.encode(&mut key);
            for v in mu.iter() {
                key.extend(v.to_bits().to_le_bytes());
            }
            for v in sigma.iter() {
                key.extend(v.to_bits().to_le_bytes());
            }
            let value = match cache.get(&key) {
                Some(&v) => v,
                None => {
                    let e = expectation(&[e1, e2], &mu, &sigma, &opts.expect).map_err(
                        |source| EngineError::Expect {
                            context: format!("K({}, {})", i, j),
                            source,
                        },
                    )?;
                    max_se = max_se.max(sv * e.std_error);
                    cache.insert(key, e.value);
                    e.value
                }
            };
            k[(i, j)] = sv * value;
            k[(j, i)] = sv * value;
        }
    }

    {
        let (vals, _) = crate::linalg::sym_eig_psd(&k);
        let min_eig = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let scale = k.diagonal().iter().cloned().fold(0.0_f64, f64::max);
        if min_eig < -(opts.tol_psd * scale.max(1e-300) + 4.0 * max_se * m as f64) {
            return Err(EngineError::PsdViolation { min_eig, scale });
        }
    }

    let labels: Vec<String> =
        outs.iter().enumerate().map(|(i, o)| format!("out{i}_{}", o.hvar)).collect();
    let readouts: Vec<String> = outs.iter().map(|o| o.readout.clone()).collect();
    Ok(OutputKernel { labels, readouts, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{parse_program, typecheck};
    use approx::assert_abs_diff_eq;

    fn mlp_b11() -> (TypedProgram, SamplingSpec) {
        let src = "\
Input W1x :: G(n)
Input b1 :: G(n)
Input W2 :: A(n, n)
Input b2 :: G(n)
Input v :: G(n)
h1 := W1x + b1 :: G(n)
x1 := relu(h1) :: H(n)
ht2 := MatMul(W2, x1) :: G(n)
h2 := ht2 + b2 :: G(n)
x2 := relu(h2) :: H(n)
Output v * x2
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.avar_variance.insert("W2".into(), 1.0);
        spec.set_sigma_in("W1x", "W1x", 1.0);
        spec.set_sigma_in("b1", "b1", 1.0);
        spec.set_sigma_in("b2", "b2", 1.0);
        spec.sigma_v.insert("v".into(), 1.0);
        (tp, spec)
    }

    #[test]
    fn worked_mlp_example() {
        let (tp, spec) = mlp_b11();
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        assert!(kt.mu.iter().all(|&m| m == 0.0));
        assert_abs_diff_eq!(kt.sigma_of("h1", "h1").unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kt.sigma_of("ht2", "ht2").unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kt.sigma_of("h2", "h2").unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(kt.sigma_of("h2", "h1").unwrap(), 0.0, epsilon = 0.0);
        let ok = output_kernel(&kt, &tp, &BTreeMap::new(), &EngineOptions::default()).unwrap();
        assert_eq!(ok.k.nrows(), 1);
        assert_abs_diff_eq!(ok.k[(0, 0)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inputs_only_reproduces_sigma_in() {
        let src = "\
Input a :: G(n)
Input b :: G(n)
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.set_sigma_in("a", "a", 2.0);
        spec.set_sigma_in("a", "b", 0.5);
        spec.set_sigma_in("b", "b", 1.0);
        spec.mu_in.insert("a".into(), 0.3);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        assert_eq!(kt.mu_of("a").unwrap(), 0.3);
        assert_eq!(kt.mu_of("b").unwrap(), 0.0);
        assert_eq!(kt.sigma_of("a", "b").unwrap(), 0.5);
    }

    #[test]
    fn different_avars_give_exact_zero() {
        let src = "\
Input g :: G(n)
Input W :: A(n, n)
Input U :: A(n, n)
x := relu(g) :: H(n)
p := MatMul(W, x) :: G(n)
q := MatMul(U, x) :: G(n)
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.avar_variance.insert("W".into(), 1.0);
        spec.avar_variance.insert("U".into(), 2.0);
        spec.set_sigma_in("g", "g", 1.0);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        assert_eq!(kt.sigma_of("p", "q").unwrap(), 0.0);
        assert!(kt.sigma_of("p", "p").unwrap() > 0.0);
    }

    #[test]
    fn duplicated_gvar_copies_rows() {
        let src = "\
Input g :: G(n)
Input W :: A(n, n)
x := relu(g) :: H(n)
p := MatMul(W, x) :: G(n)
q := 1 * p :: G(n)
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.avar_variance.insert("W".into(), 1.5);
        spec.set_sigma_in("g", "g", 1.0);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        for other in ["g", "p", "q"] {
            assert_eq!(
                kt.sigma_of("q", other).unwrap().to_bits(),
                kt.sigma_of("p", other).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn layernorm_cvar_limits() {
        // nu = E z = 0; var = E z^2 - nu^2 = Sigma(g, g)
        let src = "\
Input g :: G(n)
nu := Moment(id; g) :: C
varr := Moment(sq_sub_sq; g; nu) :: C
x := ln_relu(g; nu, varr) :: H(n)
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.set_sigma_in("g", "g", 0.75);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        assert_abs_diff_eq!(kt.cvar_limit("nu").unwrap(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(kt.cvar_limit("varr").unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn moment_of_constant_is_one() {
        let src = "\
Input g :: G(n)
one := Moment(const1; ) :: C
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let spec = SamplingSpec::default();
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        assert_eq!(kt.cvar_limit("one").unwrap(), 1.0);
    }

    #[test]
    fn missing_avar_variance_is_an_error() {
        let src = "\
Input g :: G(n)
Input W :: A(n, n)
x := relu(g) :: H(n)
p := MatMul(W, x) :: G(n)
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let err = compute_mu_sigma(&tp, &SamplingSpec::default(), &EngineOptions::default());
        assert!(matches!(err, Err(EngineError::MissingAvarVariance { .. })));
    }

    #[test]
    fn two_readouts_block_diagonal() {
        let src = "\
Input g :: G(n)
Input v1 :: G(n)
Input v2 :: G(n)
x := relu(g) :: H(n)
Output v1 * x
Output v2 * x
";
        let tp = typecheck(&parse_program(src).unwrap()).unwrap();
        let mut spec = SamplingSpec::default();
        spec.set_sigma_in("g", "g", 1.0);
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        let ok = output_kernel(&kt, &tp, &BTreeMap::new(), &EngineOptions::default()).unwrap();
        assert_eq!(ok.k[(0, 1)], 0.0);
        assert!(ok.k[(0, 0)] > 0.0);
        assert_eq!(ok.k[(0, 0)], ok.k[(1, 1)]);
    }

    #[test]
    fn zero_nonlin_output_gives_zero_kernel() {
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
        let kt = compute_mu_sigma(&tp, &spec, &EngineOptions::default()).unwrap();
        let ok = output_kernel(&kt, &tp, &BTreeMap::new(), &EngineOptions::default()).unwrap();
        assert_eq!(ok.k[(0, 0)], 0.0);
    }
}
