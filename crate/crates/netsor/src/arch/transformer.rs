//! Single-head transformer with masked attention, shared query/key/value,
//! and layernorm, expressed as a self-parametrized program.

use super::{check_vectors, dot, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::{apply, arg, NonlinRegistry, NonlinSpec, Prim, ScalarExpr};
use crate::special::softmax_masked;
use crate::vtransform::{v_transform_closed, ClosedKind};
use nalgebra::DMatrix;
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<Vec<f64>>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Sequences(s) if !s.is_empty() => {
            if s.iter().any(|seq| seq.is_empty()) {
                return Err(ArchError::BadPayload("transformer: sequence of length 0".into()));
            }
            if s.iter().flatten().any(|tok| tok.iter().all(|&v| v == 0.0)) {
                return Err(ArchError::BadPayload(
                    "transformer: zero token makes layernorm degenerate".into(),
                ));
            }
            Ok(s)
        }
        _ => Err(ArchError::BadPayload("transformer expects a sequence payload".into())),
    }
}

fn validate(cfg: &ArchConfig) -> Result<(), ArchError> {
    if cfg.sigma_w <= 0.0 || cfg.sigma_u <= 0.0 {
        return Err(ArchError::BadConfig("transformer needs sigma_w > 0 and sigma_u > 0".into()));
    }
    if cfg.nonlin != "relu" {
        return Err(ArchError::BadConfig(
            "the transformer feedforward uses relu by construction".into(),
        ));
    }
    Ok(())
}

/// `z_i + sum_{j<=i} a_j z_j` with `a = SoftMax(theta_1..theta_i)` over the
/// first i parameter slots: the post-attention embedding of token i.
fn attn_sum(t: usize, i: usize) -> ScalarExpr {
    let denom = ScalarExpr::Sum(
        (0..i).map(|k| apply(Prim::Exp { sigma: 1.0 }, ScalarExpr::Param(k))).collect(),
    );
    let mut terms = vec![arg(i - 1)];
    for j in 0..i {
        let weight = ScalarExpr::Div(
            Box::new(apply(Prim::Exp { sigma: 1.0 }, ScalarExpr::Param(j))),
            Box::new(denom.clone()),
        );
        terms.push(ScalarExpr::Prod(vec![weight, arg(j)]));
    }
    let _ = t;
    ScalarExpr::Sum(terms)
}

fn attn_mean_spec(t: usize, i: usize) -> NonlinSpec {
    NonlinSpec::new(format!("attn_mean_{t}_{i}"), t, i, attn_sum(t, i))
}

fn attn_var_spec(t: usize, i: usize) -> NonlinSpec {
    let s = attn_sum(t, i);
    NonlinSpec::new(
        format!("attn_var_{t}_{i}"),
        t,
        i + 1,
        ScalarExpr::Sum(vec![
            ScalarExpr::Prod(vec![s.clone(), s]),
            ScalarExpr::Neg(Box::new(ScalarExpr::Prod(vec![
                ScalarExpr::Param(i),
                ScalarExpr::Param(i),
            ]))),
        ]),
    )
}

fn attn_ln_spec(t: usize, i: usize) -> NonlinSpec {
    NonlinSpec::new(
        format!("attn_ln_{t}_{i}"),
        t,
        i + 2,
        ScalarExpr::Div(
            Box::new(ScalarExpr::Sum(vec![
                attn_sum(t, i),
                ScalarExpr::Neg(Box::new(ScalarExpr::Param(i))),
            ])),
            Box::new(ScalarExpr::Sqrt(Box::new(ScalarExpr::Param(i + 1)))),
        ),
    )
}

fn sum2_spec() -> NonlinSpec {
    NonlinSpec::new("sum2", 2, 0, ScalarExpr::Sum(vec![arg(0), arg(1)]))
}

fn sum2_sq_sub_spec() -> NonlinSpec {
    let s = ScalarExpr::Sum(vec![arg(0), arg(1)]);
    NonlinSpec::new(
        "sum2_sq_sub",
        2,
        1,
        ScalarExpr::Sum(vec![
            ScalarExpr::Prod(vec![s.clone(), s]),
            ScalarExpr::Neg(Box::new(ScalarExpr::Prod(vec![
                ScalarExpr::Param(0),
                ScalarExpr::Param(0),
            ]))),
        ]),
    )
}

fn ln2_spec() -> NonlinSpec {
    NonlinSpec::new(
        "ln2",
        2,
        2,
        ScalarExpr::Div(
            Box::new(ScalarExpr::Sum(vec![
                arg(0),
                arg(1),
                ScalarExpr::Neg(Box::new(ScalarExpr::Param(0))),
            ])),
            Box::new(ScalarExpr::Sqrt(Box::new(ScalarExpr::Param(1)))),
        ),
    )
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    validate(cfg)?;
    let seqs = payload(cfg)?;
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "transformer tokens")? as f64;
    let registry = NonlinRegistry::builtin();
    let depth = cfg.depth;

    let mut p = Program::new();
    p.nonlins.insert("relu".into(), registry.get("relu").unwrap().clone());
    p.nonlins.insert("sum2".into(), sum2_spec());
    p.nonlins.insert("sum2_sq_sub".into(), sum2_sq_sub_spec());
    p.nonlins.insert("ln2".into(), ln2_spec());
    p.nonlins.insert("prod2".into(), registry.get("prod2").unwrap().clone());

    let mut sampling = SamplingSpec::default();
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let sb2 = cfg.sigma_b * cfg.sigma_b;

    // inputs
    for (a, seq) in seqs.iter().enumerate() {
        for i in 1..=seq.len() {
            p.statements.push(Statement {
                target: format!("U1x{}_{}", i, a + 1),
                expr: Expr::Input,
                ty: VarType::g("n"),
            });
        }
    }
    for l in 1..=depth {
        if l >= 2 {
            p.statements.push(Statement {
                target: format!("U{l}"),
                expr: Expr::Input,
                ty: VarType::a("n", "n"),
            });
            sampling.avar_variance.insert(format!("U{l}"), su2);
        }
        for w in ["W1", "W2"] {
            p.statements.push(Statement {
                target: format!("{w}_{l}"),
                expr: Expr::Input,
                ty: VarType::a("n", "n"),
            });
            sampling.avar_variance.insert(format!("{w}_{l}"), sw2);
        }
        for bvar in ["b1", "b2"] {
            p.statements.push(Statement {
                target: format!("{bvar}_{l}"),
                expr: Expr::Input,
                ty: VarType::g("n"),
            });
            sampling.set_sigma_in(format!("{bvar}_{l}"), format!("{bvar}_{l}"), sb2);
        }
    }
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });
    for (a, sa) in seqs.iter().enumerate() {
        for (i, ti) in sa.iter().enumerate() {
            for (b, sb) in seqs.iter().enumerate().take(a + 1) {
                for (j, tj) in sb.iter().enumerate() {
                    if b == a && j > i {
                        continue;
                    }
                    sampling.set_sigma_in(
                        format!("U1x{}_{}", i + 1, a + 1),
                        format!("U1x{}_{}", j + 1, b + 1),
                        su2 * dot(ti, tj) / m,
                    );
                }
            }
        }
    }

    let mut labels = Vec::new();
    for (a, seq) in seqs.iter().enumerate() {
        let a1 = a + 1;
        let t = seq.len();
        for l in 1..=depth {
            // keys
            for i in 1..=t {
                let expr = if l == 1 {
                    Expr::LinComb { terms: vec![(1.0, format!("U1x{i}_{a1}"))] }
                } else {
                    Expr::MatMul { avar: format!("U{l}"), hvar: format!("x{}_{i}_{a1}", l - 1) }
                };
                p.statements.push(Statement {
                    target: format!("k{l}_{i}_{a1}"),
                    expr,
                    ty: VarType::g("n"),
                });
            }
            for i in 1..=t {
                // attention logits for tokens up to i
                for j in 1..=i {
                    p.statements.push(Statement {
                        target: format!("c{l}_{i}_{j}_{a1}"),
                        expr: Expr::Moment {
                            name: "prod2".into(),
                            gvars: vec![format!("k{l}_{i}_{a1}"), format!("k{l}_{j}_{a1}")],
                            cvars: vec![],
                        },
                        ty: VarType::c(),
                    });
                }
                let mean = attn_mean_spec(t, i);
                let var = attn_var_spec(t, i);
                let ln = attn_ln_spec(t, i);
                for s in [&mean, &var, &ln] {
                    p.nonlins.entry(s.name.clone()).or_insert_with(|| s.clone());
                }
                let ks: Vec<String> = (1..=t).map(|j| format!("k{l}_{j}_{a1}")).collect();
                let cs: Vec<String> = (1..=i).map(|j| format!("c{l}_{i}_{j}_{a1}")).collect();
                p.statements.push(Statement {
                    target: format!("nu{l}_{i}_{a1}"),
                    expr: Expr::Moment { name: mean.name.clone(), gvars: ks.clone(), cvars: cs.clone() },
                    ty: VarType::c(),
                });
                let mut cs_nu = cs.clone();
                cs_nu.push(format!("nu{l}_{i}_{a1}"));
                p.statements.push(Statement {
                    target: format!("var{l}_{i}_{a1}"),
                    expr: Expr::Moment { name: var.name.clone(), gvars: ks.clone(), cvars: cs_nu.clone() },
                    ty: VarType::c(),
                });
                let mut cs_all = cs_nu;
                cs_all.push(format!("var{l}_{i}_{a1}"));
                p.statements.push(Statement {
                    target: format!("h{l}_{i}_{a1}"),
                    expr: Expr::Nonlin { name: ln.name.clone(), gvars: ks, cvars: cs_all },
                    ty: VarType::h("n"),
                });
            }
            // feedforward with skip and layernorm
            for i in 1..=t {
                p.statements.push(Statement {
                    target: format!("y1_{l}_{i}_{a1}"),
                    expr: Expr::MatMul { avar: format!("W1_{l}"), hvar: format!("h{l}_{i}_{a1}") },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("yh1_{l}_{i}_{a1}"),
                    expr: Expr::LinComb {
                        terms: vec![(1.0, format!("y1_{l}_{i}_{a1}")), (1.0, format!("b1_{l}"))],
                    },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("xh1_{l}_{i}_{a1}"),
                    expr: Expr::Nonlin {
                        name: "relu".into(),
                        gvars: vec![format!("yh1_{l}_{i}_{a1}")],
                        cvars: vec![],
                    },
                    ty: VarType::h("n"),
                });
                p.statements.push(Statement {
                    target: format!("y2_{l}_{i}_{a1}"),
                    expr: Expr::MatMul { avar: format!("W2_{l}"), hvar: format!("xh1_{l}_{i}_{a1}") },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("yh2_{l}_{i}_{a1}"),
                    expr: Expr::LinComb {
                        terms: vec![(1.0, format!("y2_{l}_{i}_{a1}")), (1.0, format!("b2_{l}"))],
                    },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("nup{l}_{i}_{a1}"),
                    expr: Expr::Moment {
                        name: "sum2".into(),
                        gvars: vec![format!("yh2_{l}_{i}_{a1}"), format!("y1_{l}_{i}_{a1}")],
                        cvars: vec![],
                    },
                    ty: VarType::c(),
                });
                p.statements.push(Statement {
                    target: format!("varp{l}_{i}_{a1}"),
                    expr: Expr::Moment {
                        name: "sum2_sq_sub".into(),
                        gvars: vec![format!("yh2_{l}_{i}_{a1}"), format!("y1_{l}_{i}_{a1}")],
                        cvars: vec![format!("nup{l}_{i}_{a1}")],
                    },
                    ty: VarType::c(),
                });
                p.statements.push(Statement {
                    target: format!("x{l}_{i}_{a1}"),
                    expr: Expr::Nonlin {
                        name: "ln2".into(),
                        gvars: vec![format!("yh2_{l}_{i}_{a1}"), format!("y1_{l}_{i}_{a1}")],
                        cvars: vec![format!("nup{l}_{i}_{a1}"), format!("varp{l}_{i}_{a1}")],
                    },
                    ty: VarType::h("n"),
                });
            }
        }
        for i in 1..=t {
            p.outputs.push(Output { readout: "v".into(), hvar: format!("x{depth}_{i}_{a1}") });
            labels.push(format!("t{i}_seq{a1}"));
        }
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built transformer failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// Block-matrix transformer kernel: per layer, masked-softmax attention
/// mixing, layernorm normalization, ReLU feedforward, and the skip sum,
/// ending with `sigma_v^2 / sigma_u^2` times the final key covariance.
pub fn transformer_kernel(cfg: &ArchConfig) -> Result<OutputKernel, ArchError> {
    validate(cfg)?;
    let seqs = payload(cfg)?;
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "transformer tokens")? as f64;
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let sb2 = cfg.sigma_b * cfg.sigma_b;

    let sizes: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |acc, &s| {
            let v = *acc;
            *acc += s;
            Some(v)
        })
        .collect();
    let total: usize = sizes.iter().sum();

    let mut sk = DMatrix::zeros(total, total);
    for (a, sa) in seqs.iter().enumerate() {
        for (i, ti) in sa.iter().enumerate() {
            for (b, sbq) in seqs.iter().enumerate() {
                for (j, tj) in sbq.iter().enumerate() {
                    sk[(offsets[a] + i, offsets[b] + j)] = su2 * dot(ti, tj) / m;
                }
            }
        }
    }

    for _l in 1..=cfg.depth {
        // masked row-softmax attention per sequence, as a block-diagonal mix
        let mut mix = DMatrix::identity(total, total); // I + Delta
        for (a, &t) in sizes.iter().enumerate() {
            let o = offsets[a];
            for i in 0..t {
                let logits: Vec<f64> = (0..t).map(|j| sk[(o + i, o + j)]).collect();
                let mut weights = vec![0.0; t];
                softmax_masked(&logits, i + 1, &mut weights);
                for j in 0..t {
                    mix[(o + i, o + j)] += weights[j];
                }
            }
        }
        let mixed = &mix * &sk * mix.transpose();
        let dinv: Vec<f64> = (0..total).map(|i| 1.0 / mixed[(i, i)].sqrt()).collect();
        // layernorm forces a unit correlation scale: the diagonal is the
        // variance constant exactly, not up to sqrt rounding
        let shat = DMatrix::from_fn(total, total, |i, j| {
            if i == j {
                sw2
            } else {
                sw2 * dinv[i] * mixed[(i, j)] * dinv[j]
            }
        });
        // feedforward: relu V-transform with biases on both sides
        let biased = shat.map(|v| v + sb2);
        let sff = v_transform_closed(ClosedKind::Relu, &biased)
            .map_err(|e| ArchError::Engine(e.to_string()))?
            .map(|v| sw2 * v + sb2);
        // skip + layernorm
        let sum = &sff + &shat;
        let dinv2: Vec<f64> = (0..total).map(|i| 1.0 / sum[(i, i)].sqrt()).collect();
        sk = DMatrix::from_fn(total, total, |i, j| {
            if i == j {
                su2
            } else {
                su2 * dinv2[i] * sum[(i, j)] * dinv2[j]
            }
        });
    }

    let sv2 = cfg.sigma_v * cfg.sigma_v;
    let k = DMatrix::from_fn(total, total, |i, j| {
        if i == j {
            sv2
        } else {
            sk[(i, j)] * (sv2 / su2)
        }
    });
    let mut labels = Vec::new();
    for (a, &t) in sizes.iter().enumerate() {
        for i in 1..=t {
            labels.push(format!("t{i}_seq{}", a + 1));
        }
    }
    Ok(OutputKernel { labels, readouts: vec!["v".into(); total], k })
}

#[cfg(test)]
mod tests {
    use super::super::{ArchKind, InputPayload};
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(seqs: Vec<Vec<Vec<f64>>>, depth: usize) -> ArchConfig {
        ArchConfig {
            kind: ArchKind::Transformer,
            depth,
            nonlin: "relu".into(),
            sigma_w: 1.0,
            sigma_u: 0.9,
            sigma_b: 0.2,
            sigma_v: 1.3,
            payload: InputPayload::Sequences(seqs),
        }
    }

    #[test]
    fn diagonal_is_sigma_v_squared_exactly() {
        let seqs = vec![
            vec![vec![1.0, 0.1], vec![0.2, -0.7], vec![0.5, 0.5]],
            vec![vec![-0.3, 0.9], vec![1.1, 0.0]],
        ];
        let k = transformer_kernel(&cfg(seqs, 2)).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(k.k[(i, i)], 1.3 * 1.3, epsilon = 1e-12);
        }
    }

    #[test]
    fn masked_attention_is_causal() {
        // modifying a later token must not change the diagonal-block entries
        // of earlier tokens within the same sequence
        let base = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]];
        let mut changed = base.clone();
        changed[0][2] = vec![-2.0, 0.3];
        let k1 = transformer_kernel(&cfg(base, 2)).unwrap();
        let k2 = transformer_kernel(&cfg(changed, 2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(k1.k[(i, j)], k2.k[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_token_rejected() {
        let err = transformer_kernel(&cfg(vec![vec![vec![0.0, 0.0]]], 1));
        assert!(matches!(err, Err(ArchError::BadPayload(_))));
    }

    #[test]
    fn attn_exprs_reduce_to_plain_softmax() {
        // attn_mean over 3 tokens, i = 2: weights softmax(c21, c22)
        let spec = attn_mean_spec(3, 2);
        let z = [0.4, -1.0, 9.0]; // token 3 must be masked out
        let c = [0.3, 0.8];
        let got = spec.eval(&z, &c);
        let mut w = vec![0.0; 3];
        softmax_masked(&[0.3, 0.8, 0.0], 2, &mut w);
        let expect = z[1] + w[0] * z[0] + w[1] * z[1];
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);
    }
}
