//! Finite-width instantiation and forward evaluation of typed programs.

use super::exactsum::{exact_dot, ExactAcc};
use super::rng::{domain, normals_for_coords};
use crate::engine::SamplingSpec;
use crate::lang::{Expr, TypeKind, TypedProgram};
use crate::linalg::pivoted_cholesky;
use crate::nonlin::{affine, arg, ScalarExpr};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    MissingAvarVariance { name: String },
    MissingInputCvar { name: String },
    WidthTooSmall,
    /// A non-finite value appeared while evaluating the given statement.
    NonFinite { statement: usize, name: String },
    NotEnoughSeeds,
    DegenerateWidths,
    NoTheory(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::MissingAvarVariance { name } => {
                write!(f, "sampling spec has no variance for A-var `{name}`")
            }
            SimError::MissingInputCvar { name } => {
                write!(f, "sampling spec has no limit for input C-var `{name}`")
            }
            SimError::WidthTooSmall => write!(f, "width must be at least 1"),
            SimError::NonFinite { statement, name } => {
                write!(f, "non-finite value at statement {} (`{name}`)", statement + 1)
            }
            SimError::NotEnoughSeeds => write!(f, "covariance estimation needs at least 2 seeds"),
            SimError::DegenerateWidths => {
                write!(f, "convergence study needs >= 3 widths spanning >= 2 octaves")
            }
            SimError::NoTheory(m) => write!(f, "theoretical kernel unavailable: {m}"),
        }
    }
}

impl std::error::Error for SimError {}

/// Row-major square matrix.
#[derive(Debug, Clone)]
pub struct RowMat {
    pub n: usize,
    pub data: Vec<f64>,
}

impl RowMat {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Concrete arrays for one (width, seed) draw.
#[derive(Debug, Clone)]
pub struct Instantiation {
    pub width: usize,
    pub seed: u64,
    pub avars: HashMap<String, RowMat>,
    pub vectors: HashMap<String, Vec<f64>>,
    pub cvars_in: HashMap<String, f64>,
}

/// Sample all input arrays: A-vars with iid N(0, sigma_W^2/n) entries, input
/// G-vars jointly per coordinate from N(mu_in, Sigma_in), readouts
/// independently from N(0, sigma_v^2).
pub fn instantiate(
    tp: &TypedProgram,
    spec: &SamplingSpec,
    width: usize,
    seed: u64,
) -> Result<Instantiation, SimError> {
    if width == 0 {
        return Err(SimError::WidthTooSmall);
    }
    let readouts: std::collections::HashSet<&str> =
        tp.outputs().iter().map(|o| o.readout.as_str()).collect();
    let inputs: Vec<&str> = tp
        .program
        .statements
        .iter()
        .filter(|s| {
            s.expr == Expr::Input && s.ty.kind == TypeKind::G && !readouts.contains(s.target.as_str())
        })
        .map(|s| s.target.as_str())
        .collect();

    let mut sigma_lookup: HashMap<(&str, &str), f64> = HashMap::new();
    for (a, b, v) in &spec.sigma_in {
        sigma_lookup.insert((a.as_str(), b.as_str()), *v);
        sigma_lookup.insert((b.as_str(), a.as_str()), *v);
    }
    let m = inputs.len();
    let sigma_in =
        DMatrix::from_fn(m, m, |i, j| *sigma_lookup.get(&(inputs[i], inputs[j])).unwrap_or(&0.0));
    let mu_in: Vec<f64> =
        inputs.iter().map(|g| *spec.mu_in.get(*g).unwrap_or(&0.0)).collect();
    let (l, perm) = pivoted_cholesky(&sigma_in, 1e-12);
    let rank = (0..m).take_while(|&k| l[(k, k)] > 0.0).count();

    let mut vectors: HashMap<String, Vec<f64>> =
        inputs.iter().map(|g| (g.to_string(), vec![0.0; width])).collect();

    // joint input draw: one shared u per coordinate
    if m > 0 {
        let mut scratch = vec![0.0; m * width];
        normals_for_coords(seed, domain::INPUTS, 0, rank.max(1), 0..width, |coord, u| {
            for i in 0..m {
                let mut acc = mu_in[perm[i]];
                for k in 0..rank {
                    acc += l[(i, k)] * u[k];
                }
                scratch[perm[i] * width + coord] = acc;
            }
        });
        for (i, g) in inputs.iter().enumerate() {
            vectors.get_mut(*g).unwrap().copy_from_slice(&scratch[i * width..(i + 1) * width]);
        }
    }

    // readouts: independent N(0, sigma_v^2), indexed in output order
    let mut readout_order: Vec<&str> = Vec::new();
    for o in tp.outputs() {
        if !readout_order.contains(&o.readout.as_str()) {
            readout_order.push(o.readout.as_str());
        }
    }
    for (ri, r) in readout_order.iter().enumerate() {
        let sv = spec.sigma_v.get(*r).copied().unwrap_or(1.0).max(0.0).sqrt();
        let mut v = vec![0.0; width];
        normals_for_coords(seed, domain::READOUT, ri as u32, 1, 0..width, |coord, u| {
            v[coord] = sv * u[0];
        });
        vectors.insert(r.to_string(), v);
    }

    // A-vars: one stream family per variable, one block run per row
    let mut avars = HashMap::new();
    let avar_names = tp.avars();
    for (ai, a) in avar_names.iter().enumerate() {
        let used = tp.program.statements.iter().any(
            |s| matches!(&s.expr, Expr::MatMul { avar, .. } if avar == a),
        );
        let sw2 = match spec.avar_variance.get(*a) {
            Some(&v) => v,
            None if used => {
                return Err(SimError::MissingAvarVariance { name: a.to_string() })
            }
            None => continue, // unused and unspecified: skip sampling
        };
        let scale = (sw2 / width as f64).sqrt();
        let mut data = vec![0.0; width * width];
        data.par_chunks_mut(width).enumerate().for_each(|(row, out)| {
            let key = super::rng::StreamKey {
                master: seed,
                domain: domain::AVAR,
                var: ai as u32,
                block: row as u64,
            };
            super::rng::normals_into(key, out);
            for v in out.iter_mut() {
                *v *= scale;
            }
        });
        avars.insert(a.to_string(), RowMat { n: width, data });
    }

    // input C-vars take their limit value as the finite-width sample
    let mut cvars_in = HashMap::new();
    for s in &tp.program.statements {
        if s.expr == Expr::Input && s.ty.kind == TypeKind::C {
            let v = spec
                .theta_in
                .get(&s.target)
                .copied()
                .ok_or_else(|| SimError::MissingInputCvar { name: s.target.clone() })?;
            cvars_in.insert(s.target.clone(), v);
        }
    }

    Ok(Instantiation { width, seed, avars, vectors, cvars_in })
}

/// Forward evaluation result: output scalars plus every vector variable's
/// array and every C-var's value.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub outputs: Vec<f64>,
    pub vectors: HashMap<String, Vec<f64>>,
    pub cvars: HashMap<String, f64>,
}

/// Evaluate the program statements in order at finite width.
pub fn forward(tp: &TypedProgram, inst: &Instantiation) -> Result<ForwardResult, SimError> {
    let n = inst.width;
    let mut vectors: HashMap<String, Vec<f64>> = HashMap::new();
    let mut cvars: HashMap<String, f64> = inst.cvars_in.clone();

    let check = |stmt: usize, name: &str, vals: &[f64]| -> Result<(), SimError> {
        if vals.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(SimError::NonFinite { statement: stmt, name: name.to_string() })
        }
    };

    for (si, s) in tp.program.statements.iter().enumerate() {
        match &s.expr {
            Expr::Input => {
                if matches!(s.ty.kind, TypeKind::G) {
                    let v = inst
                        .vectors
                        .get(&s.target)
                        .cloned()
                        .unwrap_or_else(|| vec![0.0; n]);
                    vectors.insert(s.target.clone(), v);
                }
            }
            Expr::LinComb { terms } => {
                // evaluated through the same expression machinery the
                // transforms substitute, so rewrites stay bit-identical
                let expr: ScalarExpr =
                    affine(terms.iter().enumerate().map(|(k, (c, _))| (*c, arg(k))).collect());
                let args: Vec<&[f64]> =
                    terms.iter().map(|(_, v)| vectors[v].as_slice()).collect();
                let mut out = vec![0.0; n];
                let mut slot = vec![0.0; terms.len()];
                for alpha in 0..n {
                    for (k, a) in args.iter().enumerate() {
                        slot[k] = a[alpha];
                    }
                    out[alpha] = expr.eval(&slot, &[]);
                }
                check(si, &s.target, &out)?;
                vectors.insert(s.target.clone(), out);
            }
            Expr::Nonlin { name, gvars, cvars: cs } => {
                let spec = &tp.program.nonlins[name];
                let params: Vec<f64> = cs.iter().map(|c| cvars[c]).collect();
                let args: Vec<&[f64]> = gvars.iter().map(|v| vectors[v].as_slice()).collect();
                let mut out = vec![0.0; n];
                let mut slot = vec![0.0; gvars.len()];
                for alpha in 0..n {
                    for (k, a) in args.iter().enumerate() {
                        slot[k] = a[alpha];
                    }
                    out[alpha] = spec.expr.eval(&slot, &params);
                }
                check(si, &s.target, &out)?;
                vectors.insert(s.target.clone(), out);
            }
            Expr::MatMul { avar, hvar } => {
                let w = &inst.avars[avar];
                let x = &vectors[hvar];
                let mut out = vec![0.0; n];
                out.par_iter_mut()
                    .enumerate()
                    .for_each(|(row, o)| *o = exact_dot(w.row(row), x));
                check(si, &s.target, &out)?;
                vectors.insert(s.target.clone(), out);
            }
            Expr::Moment { name, gvars, cvars: cs } => {
                let spec = &tp.program.nonlins[name];
                let params: Vec<f64> = cs.iter().map(|c| cvars[c]).collect();
                let args: Vec<&[f64]> = gvars.iter().map(|v| vectors[v].as_slice()).collect();
                let mut acc = ExactAcc::new();
                let mut slot = vec![0.0; gvars.len()];
                for alpha in 0..n {
                    for (k, a) in args.iter().enumerate() {
                        slot[k] = a[alpha];
                    }
                    let val = spec.expr.eval(&slot, &params);
                    if !val.is_finite() {
                        return Err(SimError::NonFinite { statement: si, name: s.target.clone() });
                    }
                    acc.add(val);
                }
                let v = acc.finalize() / n as f64;
                check(si, &s.target, &[v])?;
                cvars.insert(s.target.clone(), v);
            }
        }
    }

    let sqrt_n = (n as f64).sqrt();
    let outputs: Vec<f64> = tp
        .outputs()
        .iter()
        .map(|o| exact_dot(&inst.vectors[&o.readout], &vectors[&o.hvar]) / sqrt_n)
        .collect();
    if outputs.iter().any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite {
            statement: tp.program.statements.len(),
            name: "output".into(),
        });
    }
    Ok(ForwardResult { outputs, vectors, cvars })
}
