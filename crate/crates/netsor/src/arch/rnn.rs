//! Simple RNN over a set of input sequences.

use super::{check_vectors, dot, generic_kernel, vpair, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{EngineOptions, OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::NonlinRegistry;
use nalgebra::DMatrix;
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<Vec<f64>>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Sequences(s) if !s.is_empty() => {
            if s.iter().any(|seq| seq.is_empty()) {
                Err(ArchError::BadPayload("rnn: sequence of length 0".into()))
            } else {
                Ok(s)
            }
        }
        _ => Err(ArchError::BadPayload("rnn expects a non-empty sequence payload".into())),
    }
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let seqs = payload(cfg)?;
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "rnn tokens")? as f64;
    let registry = NonlinRegistry::builtin();
    let phi = registry
        .get(&cfg.nonlin)
        .filter(|s| s.arity == 1 && s.param_arity == 0)
        .ok_or_else(|| ArchError::BadConfig(format!("unknown unary nonlinearity `{}`", cfg.nonlin)))?
        .clone();

    let mut p = Program::new();
    p.nonlins.insert(phi.name.clone(), phi.clone());
    let mut sampling = SamplingSpec::default();

    // token embeddings, sequence by sequence
    for (a, seq) in seqs.iter().enumerate() {
        for i in 1..=seq.len() {
            p.statements.push(Statement {
                target: format!("Ux{}_{}", i, a + 1),
                expr: Expr::Input,
                ty: VarType::g("n"),
            });
        }
    }
    p.statements.push(Statement { target: "W".into(), expr: Expr::Input, ty: VarType::a("n", "n") });
    p.statements.push(Statement { target: "b".into(), expr: Expr::Input, ty: VarType::g("n") });
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });
    sampling.avar_variance.insert("W".into(), cfg.sigma_w * cfg.sigma_w);
    sampling.set_sigma_in("b", "b", cfg.sigma_b * cfg.sigma_b);
    let su2 = cfg.sigma_u * cfg.sigma_u;
    for (a, seq_a) in seqs.iter().enumerate() {
        for (i, tok_i) in seq_a.iter().enumerate() {
            for (bq, seq_b) in seqs.iter().enumerate().take(a + 1) {
                for (j, tok_j) in seq_b.iter().enumerate() {
                    if bq == a && j > i {
                        continue;
                    }
                    sampling.set_sigma_in(
                        format!("Ux{}_{}", i + 1, a + 1),
                        format!("Ux{}_{}", j + 1, bq + 1),
                        su2 * dot(tok_i, tok_j) / m,
                    );
                }
            }
        }
    }

    // per-sequence recurrence
    let mut labels = Vec::new();
    for (a, seq) in seqs.iter().enumerate() {
        let a1 = a + 1;
        for i in 1..=seq.len() {
            if i == 1 {
                p.statements.push(Statement {
                    target: format!("h{i}_{a1}"),
                    expr: Expr::LinComb {
                        terms: vec![(1.0, format!("Ux{i}_{a1}")), (1.0, "b".into())],
                    },
                    ty: VarType::g("n"),
                });
            } else {
                p.statements.push(Statement {
                    target: format!("ht{i}_{a1}"),
                    expr: Expr::MatMul { avar: "W".into(), hvar: format!("s{}_{a1}", i - 1) },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("h{i}_{a1}"),
                    expr: Expr::LinComb {
                        terms: vec![
                            (1.0, format!("ht{i}_{a1}")),
                            (1.0, format!("Ux{i}_{a1}")),
                            (1.0, "b".into()),
                        ],
                    },
                    ty: VarType::g("n"),
                });
            }
            p.statements.push(Statement {
                target: format!("s{i}_{a1}"),
                expr: Expr::Nonlin {
                    name: phi.name.clone(),
                    gvars: vec![format!("h{i}_{a1}")],
                    cvars: vec![],
                },
                ty: VarType::h("n"),
            });
        }
        for i in 1..=seq.len() {
            p.outputs.push(Output { readout: "v".into(), hvar: format!("s{i}_{a1}") });
            labels.push(format!("t{i}_seq{a1}"));
        }
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built rnn failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// Vectorized RNN kernel: iterate
/// `Sigma_H~ <- sigma_w^2 Vphi(Sigma_H~^0 + Sigma_in + sigma_b^2)` over time,
/// then `K = sigma_v^2 Vphi(Sigma_H)`. Implemented over the global
/// (sequence, time) index set so any number of sequences with unequal
/// lengths works off one table.
pub fn rnn_kernel(cfg: &ArchConfig, opts: &EngineOptions) -> Result<OutputKernel, ArchError> {
    let seqs = payload(cfg)?;
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "rnn tokens")? as f64;
    if vpair(&cfg.nonlin, 1.0, 0.0, 1.0).is_none() {
        eprintln!(
            "note: nonlinearity `{}` has no closed-form V-transform; using the generic engine",
            cfg.nonlin
        );
        return generic_kernel(&super::build(cfg)?, opts);
    }
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let sb2 = cfg.sigma_b * cfg.sigma_b;

    // flatten (sequence, time) indices in output order
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (a, seq) in seqs.iter().enumerate() {
        for i in 0..seq.len() {
            index.push((a, i));
        }
    }
    let n = index.len();
    let tok = |a: usize, i: usize| &seqs[a][i];
    let maxt = seqs.iter().map(|s| s.len()).max().unwrap();

    // Sigma over h^{ia}; filled in increasing max(i, j). The W-term block
    // (Sigma over h~) is zero whenever either time index is 1.
    let mut sh = DMatrix::zeros(n, n);
    for tau in 0..maxt {
        for (r, &(a, i)) in index.iter().enumerate() {
            for (c, &(bq, j)) in index.iter().enumerate().take(r + 1) {
                if i.max(j) != tau {
                    continue;
                }
                let tilde = if i >= 1 && j >= 1 {
                    let ri = r - 1; // previous time step of the same sequence
                    let cj = c - 1;
                    sw2 * vpair(&cfg.nonlin, sh[(ri, ri)], sh[(ri, cj)], sh[(cj, cj)])
                        .ok_or_else(|| ArchError::Engine("V-transform failed".into()))?
                } else {
                    0.0
                };
                let h = tilde + su2 * dot(tok(a, i), tok(bq, j)) / m + sb2;
                sh[(r, c)] = h;
                sh[(c, r)] = h;
            }
        }
    }

    let sv2 = cfg.sigma_v * cfg.sigma_v;
    let mut k = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in 0..=r {
            let v = sv2
                * vpair(&cfg.nonlin, sh[(r, r)], sh[(r, c)], sh[(c, c)])
                    .ok_or_else(|| ArchError::Engine("V-transform failed".into()))?;
            k[(r, c)] = v;
            k[(c, r)] = v;
        }
    }
    let labels: Vec<String> =
        index.iter().map(|&(a, i)| format!("t{}_seq{}", i + 1, a + 1)).collect();
    Ok(OutputKernel { labels, readouts: vec!["v".into(); n], k })
}
