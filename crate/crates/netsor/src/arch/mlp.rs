//! Fully-connected network on a set of inputs.

use super::{check_vectors, dot, generic_kernel, vpair, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{EngineOptions, OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::NonlinRegistry;
use nalgebra::DMatrix;
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<f64>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Vectors(v) => Ok(v),
        _ => Err(ArchError::BadPayload("mlp expects a vector payload".into())),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let xs = payload(cfg)?;
    let m = check_vectors(xs, "mlp inputs")? as f64;
    let b = xs.len();
    let l = cfg.depth;
    let registry = NonlinRegistry::builtin();
    let phi = registry
        .get(&cfg.nonlin)
        .filter(|s| s.arity == 1 && s.param_arity == 0)
        .ok_or_else(|| ArchError::BadConfig(format!("unknown unary nonlinearity `{}`", cfg.nonlin)))?
        .clone();

    let mut p = Program::new();
    p.nonlins.insert(phi.name.clone(), phi.clone());
    let mut sampling = SamplingSpec::default();

    // inputs: embeddings, then per-layer weights/biases, then the readout
    for i in 1..=b {
        p.statements.push(Statement {
            target: format!("W1x{i}"),
            expr: Expr::Input,
            ty: VarType::g("n"),
        });
    }
    for lay in 1..=l {
        if lay >= 2 {
            p.statements.push(Statement {
                target: format!("W{lay}"),
                expr: Expr::Input,
                ty: VarType::a("n", "n"),
            });
            sampling.avar_variance.insert(format!("W{lay}"), cfg.sigma_w * cfg.sigma_w);
        }
        p.statements.push(Statement {
            target: format!("b{lay}"),
            expr: Expr::Input,
            ty: VarType::g("n"),
        });
        sampling.set_sigma_in(format!("b{lay}"), format!("b{lay}"), cfg.sigma_b * cfg.sigma_b);
    }
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });

    for i in 1..=b {
        for j in 1..=i {
            sampling.set_sigma_in(
                format!("W1x{i}"),
                format!("W1x{j}"),
                cfg.sigma_w * cfg.sigma_w * dot(&xs[i - 1], &xs[j - 1]) / m,
            );
        }
    }

    for i in 1..=b {
        p.statements.push(Statement {
            target: format!("h1_{i}"),
            expr: Expr::LinComb {
                terms: vec![(1.0, format!("W1x{i}")), (1.0, "b1".into())],
            },
            ty: VarType::g("n"),
        });
        p.statements.push(Statement {
            target: format!("x1_{i}"),
            expr: Expr::Nonlin {
                name: phi.name.clone(),
                gvars: vec![format!("h1_{i}")],
                cvars: vec![],
            },
            ty: VarType::h("n"),
        });
        for lay in 2..=l {
            p.statements.push(Statement {
                target: format!("ht{lay}_{i}"),
                expr: Expr::MatMul { avar: format!("W{lay}"), hvar: format!("x{}_{i}", lay - 1) },
                ty: VarType::g("n"),
            });
            p.statements.push(Statement {
                target: format!("h{lay}_{i}"),
                expr: Expr::LinComb {
                    terms: vec![(1.0, format!("ht{lay}_{i}")), (1.0, format!("b{lay}"))],
                },
                ty: VarType::g("n"),
            });
            p.statements.push(Statement {
                target: format!("x{lay}_{i}"),
                expr: Expr::Nonlin {
                    name: phi.name.clone(),
                    gvars: vec![format!("h{lay}_{i}")],
                    cvars: vec![],
                },
                ty: VarType::h("n"),
            });
        }
    }
    let mut labels = Vec::with_capacity(b);
    for i in 1..=b {
        p.outputs.push(Output { readout: "v".into(), hvar: format!("x{l}_{i}") });
        labels.push(format!("x{i}"));
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p).map_err(|e| {
        ArchError::BadConfig(format!("built mlp failed typecheck: {}", e[0]))
    })?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// Closed-form MLP kernel: `K <- sigma_w^2 x_i . x_j / m`, then L-1 rounds of
/// `K <- sigma_w^2 V_phi(K) + sigma_b^2`, then `sigma_v^2 V_phi(K)`.
pub fn mlp_kernel(cfg: &ArchConfig, opts: &EngineOptions) -> Result<OutputKernel, ArchError> {
    let xs = payload(cfg)?;
    let m = check_vectors(xs, "mlp inputs")? as f64;
    let b = xs.len();
    if vpair(&cfg.nonlin, 1.0, 0.0, 1.0).is_none() {
        eprintln!(
            "note: nonlinearity `{}` has no closed-form V-transform; using the generic engine",
            cfg.nonlin
        );
        return generic_kernel(&super::build(cfg)?, opts);
    }
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    // layer-1 preactivation covariance, bias included (h^1 = W^1 x + b^1)
    let mut k = DMatrix::from_fn(b, b, |i, j| sw2 * dot(&xs[i], &xs[j]) / m + sb2);
    let vphi = |k: &DMatrix<f64>| -> Result<DMatrix<f64>, ArchError> {
        let mut out = DMatrix::zeros(b, b);
        for i in 0..b {
            for j in 0..=i {
                let v = vpair(&cfg.nonlin, k[(i, i)], k[(i, j)], k[(j, j)])
                    .ok_or_else(|| ArchError::Engine("missing V-transform".into()))?;
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        Ok(out)
    };
    for _ in 1..cfg.depth {
        k = vphi(&k)?* sw2;
        for i in 0..b {
            for j in 0..b {
                k[(i, j)] += sb2;
            }
        }
    }
    let k = vphi(&k)? * (cfg.sigma_v * cfg.sigma_v);
    let labels: Vec<String> = (1..=b).map(|i| format!("x{i}")).collect();
    Ok(OutputKernel { labels, readouts: vec!["v".into(); b], k })
}
