//! Fully-connected network with batchnorm + ReLU at every layer.

use super::{check_vectors, dot, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::{apply, arg, cnst, NonlinSpec, Prim, ScalarExpr};
use crate::vtransform::{batchnorm_v_cross, batchnorm_v_single};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<Vec<f64>>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Batches(bs) if !bs.is_empty() => {
            for (a, batch) in bs.iter().enumerate() {
                if batch.len() < 2 {
                    return Err(ArchError::BadPayload(format!(
                        "batch {a} has {} inputs; batchnorm needs >= 2",
                        batch.len()
                    )));
                }
            }
            Ok(bs)
        }
        _ => Err(ArchError::BadPayload("batchnorm-net expects a batch payload".into())),
    }
}

/// Coordinate `i` of batchnorm over `b` slots followed by `phi`:
/// `phi((z_i - mean(z)) / std(z))` with the biased batch std.
fn bn_coord_spec(b: usize, i: usize, phi: Prim) -> NonlinSpec {
    let mean = ScalarExpr::Prod(vec![
        cnst(1.0 / b as f64),
        ScalarExpr::Sum((0..b).map(arg).collect()),
    ]);
    let dev = |j: usize| ScalarExpr::Sum(vec![arg(j), ScalarExpr::Neg(Box::new(mean.clone()))]);
    let var = ScalarExpr::Prod(vec![
        cnst(1.0 / b as f64),
        ScalarExpr::Sum((0..b).map(|j| ScalarExpr::Prod(vec![dev(j), dev(j)])).collect()),
    ]);
    let core = ScalarExpr::Div(Box::new(dev(i)), Box::new(ScalarExpr::Sqrt(Box::new(var))));
    NonlinSpec::new(format!("bn{b}_{i}_relu"), b, 0, apply(phi, core))
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let batches = payload(cfg)?;
    let all: Vec<Vec<f64>> = batches.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "batchnorm inputs")? as f64;
    if cfg.nonlin != "relu" {
        return Err(ArchError::BadConfig(
            "the batchnorm network is defined with the relu nonlinearity".into(),
        ));
    }

    let mut p = Program::new();
    let mut sampling = SamplingSpec::default();
    let sw2 = cfg.sigma_w * cfg.sigma_w;

    for (a, batch) in batches.iter().enumerate() {
        for i in 1..=batch.len() {
            p.statements.push(Statement {
                target: format!("W1x{i}_{}", a + 1),
                expr: Expr::Input,
                ty: VarType::g("n"),
            });
        }
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

    for (a, ba) in batches.iter().enumerate() {
        for (i, xi) in ba.iter().enumerate() {
            for (a2, bb) in batches.iter().enumerate().take(a + 1) {
                for (j, xj) in bb.iter().enumerate() {
                    if a2 == a && j > i {
                        continue;
                    }
                    sampling.set_sigma_in(
                        format!("W1x{}_{}", i + 1, a + 1),
                        format!("W1x{}_{}", j + 1, a2 + 1),
                        sw2 * dot(xi, xj) / m,
                    );
                }
            }
        }
    }

    let mut labels = Vec::new();
    for (a, batch) in batches.iter().enumerate() {
        let a1 = a + 1;
        let bsz = batch.len();
        for i in 0..bsz {
            let spec = bn_coord_spec(bsz, i, Prim::Relu);
            p.nonlins.entry(spec.name.clone()).or_insert_with(|| spec.clone());
            p.statements.push(Statement {
                target: format!("x1_{}_{a1}", i + 1),
                expr: Expr::Nonlin {
                    name: spec.name.clone(),
                    gvars: (1..=bsz).map(|k| format!("W1x{k}_{a1}")).collect(),
                    cvars: vec![],
                },
                ty: VarType::h("n"),
            });
        }
        for l in 2..=cfg.depth {
            for i in 1..=bsz {
                p.statements.push(Statement {
                    target: format!("h{l}_{i}_{a1}"),
                    expr: Expr::MatMul {
                        avar: format!("W{l}"),
                        hvar: format!("x{}_{i}_{a1}", l - 1),
                    },
                    ty: VarType::g("n"),
                });
            }
            for i in 0..bsz {
                let spec = bn_coord_spec(bsz, i, Prim::Relu);
                p.nonlins.entry(spec.name.clone()).or_insert_with(|| spec.clone());
                p.statements.push(Statement {
                    target: format!("x{l}_{}_{a1}", i + 1),
                    expr: Expr::Nonlin {
                        name: spec.name.clone(),
                        gvars: (1..=bsz).map(|k| format!("h{l}_{k}_{a1}")).collect(),
                        cvars: vec![],
                    },
                    ty: VarType::h("n"),
                });
            }
        }
        for i in 1..=bsz {
            p.outputs.push(Output { readout: "v".into(), hvar: format!("x{}_{i}_{a1}", cfg.depth) });
            labels.push(format!("in{i}_batch{a1}"));
        }
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built batchnorm failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// Batchnorm+ReLU kernel: per layer, diagonal batch blocks via the 1D
/// integral reduction and off-diagonal blocks via the 2D reduction.
pub fn batchnorm_kernel(cfg: &ArchConfig) -> Result<OutputKernel, ArchError> {
    let batches = payload(cfg)?;
    if cfg.nonlin != "relu" {
        return Err(ArchError::BadConfig(
            "the batchnorm kernel reduction is specific to relu".into(),
        ));
    }
    let all: Vec<Vec<f64>> = batches.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "batchnorm inputs")? as f64;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let v = *acc;
            *acc += s;
            Some(v)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    // K^0 blocks
    let mut k = DMatrix::zeros(total, total);
    for (a, ba) in batches.iter().enumerate() {
        for (i, xi) in ba.iter().enumerate() {
            for (a2, bb) in batches.iter().enumerate() {
                for (j, xj) in bb.iter().enumerate() {
                    k[(offsets[a] + i, offsets[a2] + j)] = sw2 * dot(xi, xj) / m;
                }
            }
        }
    }

    for _layer in 1..=cfg.depth {
        let mut next = DMatrix::zeros(total, total);
        for a in 0..batches.len() {
            let (oa, sa) = (offsets[a], sizes[a]);
            let kaa = k.view((oa, oa), (sa, sa)).into_owned();
            let diag = batchnorm_v_single(&kaa).map_err(|e| ArchError::Engine(e.to_string()))?;
            next.view_mut((oa, oa), (sa, sa)).copy_from(&diag);
            for a2 in 0..a {
                let (ob, sb) = (offsets[a2], sizes[a2]);
                let kbb = k.view((ob, ob), (sb, sb)).into_owned();
                let kab = k.view((oa, ob), (sa, sb)).into_owned();
                let cross = batchnorm_v_cross(&kaa, &kab, &kbb)
                    .map_err(|e| ArchError::Engine(e.to_string()))?;
                next.view_mut((oa, ob), (sa, sb)).copy_from(&cross);
                next.view_mut((ob, oa), (sb, sa)).copy_from(&cross.transpose());
            }
        }
        k = next;
    }

    k *= cfg.sigma_v * cfg.sigma_v;
    let mut labels = Vec::new();
    for (a, batch) in batches.iter().enumerate() {
        for i in 1..=batch.len() {
            labels.push(format!("in{i}_batch{}", a + 1));
        }
    }
    Ok(OutputKernel { labels, readouts: vec!["v".into(); total], k })
}
