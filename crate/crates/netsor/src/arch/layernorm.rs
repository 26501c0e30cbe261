//! Fully-connected network with layernorm + ReLU at every layer, expressed
//! through Moment statements and parametrized nonlinearities.

use super::{check_vectors, dot, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::NonlinRegistry;
use crate::vtransform::{v_transform_closed, ClosedKind};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<f64>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Vectors(v) if !v.is_empty() => Ok(v),
        _ => Err(ArchError::BadPayload("layernorm-net expects a vector payload".into())),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let xs = payload(cfg)?;
    let m = check_vectors(xs, "layernorm inputs")? as f64;
    if xs.iter().any(|x| x.iter().all(|&v| v == 0.0)) {
        return Err(ArchError::BadPayload("zero input vector makes layernorm degenerate".into()));
    }
    if cfg.nonlin != "relu" {
        return Err(ArchError::BadConfig(
            "the layernorm network is defined with the relu nonlinearity".into(),
        ));
    }
    if cfg.sigma_w <= 0.0 {
        return Err(ArchError::BadConfig("layernorm needs sigma_w > 0".into()));
    }
    let registry = NonlinRegistry::builtin();
    let b = xs.len();
    let sw2 = cfg.sigma_w * cfg.sigma_w;

    let mut p = Program::new();
    for name in ["id", "sq_sub_sq", "ln_relu"] {
        p.nonlins.insert(name.into(), registry.get(name).unwrap().clone());
    }
    let mut sampling = SamplingSpec::default();

    for i in 1..=b {
        p.statements.push(Statement {
            target: format!("W1x{i}"),
            expr: Expr::Input,
            ty: VarType::g("n"),
        });
    }
    for l in 2..=cfg.depth {
        p.statements.push(Statement {
            target: format!("W{l}"),
            expr: Expr::Input,
            ty: VarType::a("n", "n"),
        });
        sampling.avar_variance.insert(format!("W{l}"), sw2);
    }
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });
    for i in 1..=b {
        for j in 1..=i {
            sampling.set_sigma_in(
                format!("W1x{i}"),
                format!("W1x{j}"),
                sw2 * dot(&xs[i - 1], &xs[j - 1]) / m,
            );
        }
    }

    let mut labels = Vec::new();
    for i in 1..=b {
        let mut h = format!("W1x{i}");
        for l in 1..=cfg.depth {
            p.statements.push(Statement {
                target: format!("nu{l}_{i}"),
                expr: Expr::Moment { name: "id".into(), gvars: vec![h.clone()], cvars: vec![] },
                ty: VarType::c(),
            });
            p.statements.push(Statement {
                target: format!("var{l}_{i}"),
                expr: Expr::Moment {
                    name: "sq_sub_sq".into(),
                    gvars: vec![h.clone()],
                    cvars: vec![format!("nu{l}_{i}")],
                },
                ty: VarType::c(),
            });
            p.statements.push(Statement {
                target: format!("x{l}_{i}"),
                expr: Expr::Nonlin {
                    name: "ln_relu".into(),
                    gvars: vec![h.clone()],
                    cvars: vec![format!("nu{l}_{i}"), format!("var{l}_{i}")],
                },
                ty: VarType::h("n"),
            });
            if l < cfg.depth {
                p.statements.push(Statement {
                    target: format!("h{}_{i}", l + 1),
                    expr: Expr::MatMul {
                        avar: format!("W{}", l + 1),
                        hvar: format!("x{l}_{i}"),
                    },
                    ty: VarType::g("n"),
                });
                h = format!("h{}_{i}", l + 1);
            }
        }
        p.outputs.push(Output { readout: "v".into(), hvar: format!("x{}_{i}", cfg.depth) });
        labels.push(format!("x{i}"));
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built layernorm failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// `Omega_bar = D^{-1/2} (Omega - nu nu^T) D^{-1/2}` with
/// `D = diag(Omega - nu nu^T)`: the layernorm limit correction.
pub fn layernorm_correction(
    omega: &DMatrix<f64>,
    nu: &DVector<f64>,
) -> Result<DMatrix<f64>, ArchError> {
    let n = omega.nrows();
    let centered = omega - nu * nu.transpose();
    let d: Vec<f64> = (0..n).map(|i| centered[(i, i)]).collect();
    if d.iter().any(|&x| x <= 0.0) {
        return Err(ArchError::Engine(
            "degenerate layernorm: nonpositive limit variance".into(),
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| centered[(i, j)] / (d[i] * d[j]).sqrt()))
}

/// Layernorm+ReLU network kernel. Everything is zero-mean, so each layer is
/// a unit-diagonal correction followed by the ReLU V-transform.
pub fn layernorm_kernel(cfg: &ArchConfig) -> Result<OutputKernel, ArchError> {
    let xs = payload(cfg)?;
    let m = check_vectors(xs, "layernorm inputs")? as f64;
    if cfg.nonlin != "relu" {
        return Err(ArchError::BadConfig("the layernorm closed form is specific to relu".into()));
    }
    let b = xs.len();
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let mut omega = DMatrix::from_fn(b, b, |i, j| sw2 * dot(&xs[i], &xs[j]) / m);
    let zero = DVector::zeros(b);
    let mut bar = layernorm_correction(&omega, &zero)?;
    for _l in 1..cfg.depth {
        omega = v_transform_closed(ClosedKind::Relu, &bar)
            .map_err(|e| ArchError::Engine(e.to_string()))?
            * sw2;
        bar = layernorm_correction(&omega, &zero)?;
    }
    let k = v_transform_closed(ClosedKind::Relu, &bar)
        .map_err(|e| ArchError::Engine(e.to_string()))?
        * (cfg.sigma_v * cfg.sigma_v);
    let labels: Vec<String> = (1..=b).map(|i| format!("x{i}")).collect();
    Ok(OutputKernel { labels, readouts: vec!["v".into(); b], k })
}
