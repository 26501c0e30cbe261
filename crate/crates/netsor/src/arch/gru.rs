//! GRU with erf activation and (1 + erf)/2 gating.
//!
//! The builder emits the circle-dialect program (nonlinearities over H-vars,
//! no manual unrolling); `unwind` recovers the explicit product form. The
//! specialized kernel evaluates the gate-product expectations as orthant
//! probabilities of a sign-flipped covariance under inflation by I/2.

use super::{check_vectors, dot, generic_kernel, ArchConfig, ArchError, BuiltProgram};
use crate::engine::{EngineOptions, OutputKernel, SamplingSpec};
use crate::lang::{typecheck, Expr, Output, Program, Statement, VarType};
use crate::nonlin::{apply, arg, NonlinSpec, Prim, ScalarExpr};
use crate::vtransform::{orthant_probability, verf_pair, OrthantQuery};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

fn payload<'a>(cfg: &'a ArchConfig) -> Result<&'a [Vec<Vec<f64>>], ArchError> {
    match &cfg.payload {
        super::InputPayload::Sequences(s) if !s.is_empty() => {
            if s.iter().any(|seq| seq.is_empty()) {
                Err(ArchError::BadPayload("gru: sequence of length 0".into()))
            } else {
                Ok(s)
            }
        }
        _ => Err(ArchError::BadPayload("gru expects a non-empty sequence payload".into())),
    }
}

/// sigma(x0) * x1: the reset gate applied to the previous state.
fn gate_spec() -> NonlinSpec {
    NonlinSpec::new(
        "gru_gate",
        2,
        0,
        ScalarExpr::Prod(vec![apply(Prim::SigmoidErf, arg(0)), arg(1)]),
    )
}

/// sigma(-x1) * x0 + sigma(x1) * phi(x2): the state update. Writing the
/// forget side as sigma(-z) keeps every factor in the erf/gate family.
fn state_spec() -> NonlinSpec {
    NonlinSpec::new(
        "gru_state",
        3,
        0,
        ScalarExpr::Sum(vec![
            ScalarExpr::Prod(vec![
                apply(Prim::SigmoidErf, ScalarExpr::Neg(Box::new(arg(1)))),
                arg(0),
            ]),
            ScalarExpr::Prod(vec![apply(Prim::SigmoidErf, arg(1)), apply(Prim::Erf, arg(2))]),
        ]),
    )
}

pub(super) fn build(cfg: &ArchConfig) -> Result<BuiltProgram, ArchError> {
    let seqs = payload(cfg)?;
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "gru tokens")? as f64;

    let mut p = Program::new();
    p.nonlins.insert("gru_gate".into(), gate_spec());
    p.nonlins.insert("gru_state".into(), state_spec());
    let mut sampling = SamplingSpec::default();

    for gate in ["z", "r", "h"] {
        for (a, seq) in seqs.iter().enumerate() {
            for i in 1..=seq.len() {
                p.statements.push(Statement {
                    target: format!("U{gate}x{}_{}", i, a + 1),
                    expr: Expr::Input,
                    ty: VarType::g("n"),
                });
            }
        }
    }
    for gate in ["z", "r", "h"] {
        p.statements.push(Statement {
            target: format!("W{gate}"),
            expr: Expr::Input,
            ty: VarType::a("n", "n"),
        });
        sampling.avar_variance.insert(format!("W{gate}"), cfg.sigma_w * cfg.sigma_w);
        p.statements.push(Statement {
            target: format!("b{gate}"),
            expr: Expr::Input,
            ty: VarType::g("n"),
        });
        sampling.set_sigma_in(format!("b{gate}"), format!("b{gate}"), cfg.sigma_b * cfg.sigma_b);
    }
    p.statements.push(Statement { target: "h0".into(), expr: Expr::Input, ty: VarType::g("n") });
    sampling.set_sigma_in("h0", "h0", 0.0);
    p.statements.push(Statement { target: "v".into(), expr: Expr::Input, ty: VarType::g("n") });

    let su2 = cfg.sigma_u * cfg.sigma_u;
    for gate in ["z", "r", "h"] {
        for (a, seq_a) in seqs.iter().enumerate() {
            for (i, tok_i) in seq_a.iter().enumerate() {
                for (bq, seq_b) in seqs.iter().enumerate().take(a + 1) {
                    for (j, tok_j) in seq_b.iter().enumerate() {
                        if bq == a && j > i {
                            continue;
                        }
                        sampling.set_sigma_in(
                            format!("U{gate}x{}_{}", i + 1, a + 1),
                            format!("U{gate}x{}_{}", j + 1, bq + 1),
                            su2 * dot(tok_i, tok_j) / m,
                        );
                    }
                }
            }
        }
    }

    let mut labels = Vec::new();
    for (a, seq) in seqs.iter().enumerate() {
        let a1 = a + 1;
        let mut prev_state = "h0".to_string();
        for t in 1..=seq.len() {
            for gate in ["z", "r"] {
                p.statements.push(Statement {
                    target: format!("h{gate}{t}_{a1}"),
                    expr: Expr::MatMul { avar: format!("W{gate}"), hvar: prev_state.clone() },
                    ty: VarType::g("n"),
                });
                p.statements.push(Statement {
                    target: format!("{gate}t{t}_{a1}"),
                    expr: Expr::LinComb {
                        terms: vec![
                            (1.0, format!("h{gate}{t}_{a1}")),
                            (1.0, format!("U{gate}x{t}_{a1}")),
                            (1.0, format!("b{gate}")),
                        ],
                    },
                    ty: VarType::g("n"),
                });
            }
            // reset-gated previous state feeds the candidate
            p.statements.push(Statement {
                target: format!("hh{t}_{a1}"),
                expr: Expr::Nonlin {
                    name: "gru_gate".into(),
                    gvars: vec![format!("rt{t}_{a1}"), prev_state.clone()],
                    cvars: vec![],
                },
                ty: VarType::h("n"),
            });
            p.statements.push(Statement {
                target: format!("hm{t}_{a1}"),
                expr: Expr::MatMul { avar: "Wh".into(), hvar: format!("hh{t}_{a1}") },
                ty: VarType::g("n"),
            });
            p.statements.push(Statement {
                target: format!("ht{t}_{a1}"),
                expr: Expr::LinComb {
                    terms: vec![
                        (1.0, format!("hm{t}_{a1}")),
                        (1.0, format!("Uhx{t}_{a1}")),
                        (1.0, "bh".into()),
                    ],
                },
                ty: VarType::g("n"),
            });
            p.statements.push(Statement {
                target: format!("h{t}_{a1}"),
                expr: Expr::Nonlin {
                    name: "gru_state".into(),
                    gvars: vec![prev_state.clone(), format!("zt{t}_{a1}"), format!("ht{t}_{a1}")],
                    cvars: vec![],
                },
                ty: VarType::h("n"),
            });
            prev_state = format!("h{t}_{a1}");
        }
        for t in 1..=seq.len() {
            p.outputs.push(Output { readout: "v".into(), hvar: format!("h{t}_{a1}") });
            labels.push(format!("t{t}_seq{a1}"));
        }
    }
    let mut sigma_v = BTreeMap::new();
    sigma_v.insert("v".to_string(), cfg.sigma_v * cfg.sigma_v);
    sampling.sigma_v = sigma_v.clone();

    let typed = typecheck(&p)
        .map_err(|e| ArchError::BadConfig(format!("built gru failed typecheck: {}", e[0])))?;
    Ok(BuiltProgram { typed, sampling, sigma_v, output_labels: labels })
}

/// The gate-product expectation
/// `zeta_{i:t, j:s} = E[sigma(z_i) prod_{p>i}(1-sigma(z_p))] x [same for j..s]`
/// as an orthant probability: flip the sign of every coordinate except the
/// leading ones and inflate the covariance by I/2. `sz` maps flattened
/// (sequence, time) indices to `Sigma(z~, z~)`; `ra`/`rb` index the two
/// sequences' time ranges.
pub fn gru_zeta(
    sz: &DMatrix<f64>,
    ra: (usize, usize, usize), // (base index of sequence a, i, t), times 1-based
    rb: (usize, usize, usize),
    points: usize,
    seed: u64,
    dim_cap: usize,
) -> Result<(f64, f64), ArchError> {
    let (base_a, i, t) = ra;
    let (base_b, j, s) = rb;
    let dim = (t - i) + (s - j) + 2;
    if dim > dim_cap {
        return Err(ArchError::Engine(format!(
            "gate-product orthant dimension {dim} exceeds cap {dim_cap}"
        )));
    }
    // flattened coordinates and their signs
    let mut coords: Vec<(usize, f64)> = Vec::with_capacity(dim);
    for pt in i..=t {
        coords.push((base_a + pt - 1, if pt == i { 1.0 } else { -1.0 }));
    }
    for q in j..=s {
        coords.push((base_b + q - 1, if q == j { 1.0 } else { -1.0 }));
    }
    let mut omega = DMatrix::from_fn(dim, dim, |r, c| {
        coords[r].1 * coords[c].1 * sz[(coords[r].0, coords[c].0)]
    });
    for d in 0..dim {
        omega[(d, d)] += 0.5;
    }
    let mut q = OrthantQuery::new(DVector::zeros(dim), omega);
    q.points = points;
    q.seed = seed;
    q.dim_cap = dim_cap;
    orthant_probability(&q).map_err(|e| ArchError::Engine(e.to_string()))
}

/// Specialized GRU kernel for erf activation and (1 + erf)/2 gating. Other
/// pairings route through the generic engine.
pub fn gru_kernel(cfg: &ArchConfig, opts: &EngineOptions) -> Result<OutputKernel, ArchError> {
    let seqs = payload(cfg)?;
    if cfg.nonlin != "erf" {
        eprintln!(
            "note: gru closed form requires the (erf, sigmoid_erf) pair; `{}` routes through \
             the generic engine",
            cfg.nonlin
        );
        return generic_kernel(&super::build(cfg)?, opts);
    }
    let all: Vec<Vec<f64>> = seqs.iter().flatten().cloned().collect();
    let m = check_vectors(&all, "gru tokens")? as f64;
    let sw2 = cfg.sigma_w * cfg.sigma_w;
    let su2 = cfg.sigma_u * cfg.sigma_u;
    let sb2 = cfg.sigma_b * cfg.sigma_b;
    let points = opts.expect.orthant_points;
    let dim_cap = opts.expect.orthant_dim_cap;
    let seed = opts.expect.seed;

    // flattened (sequence, time) index
    let mut base = Vec::with_capacity(seqs.len());
    let mut n = 0;
    for seq in seqs.iter() {
        base.push(n);
        n += seq.len();
    }
    let idx: Vec<(usize, usize)> = seqs
        .iter()
        .enumerate()
        .flat_map(|(a, seq)| (1..=seq.len()).map(move |t| (a, t)))
        .collect();
    let tok = |a: usize, t: usize| &seqs[a][t - 1];
    let maxt = seqs.iter().map(|s| s.len()).max().unwrap();

    // Sigma over z~ (= over r~) and over h~, plus the W-part tables
    let mut sz = DMatrix::zeros(n, n);
    let mut sht = DMatrix::zeros(n, n);
    let mut shz = DMatrix::zeros(n, n);

    for tau in 1..=maxt {
        // W-parts and input parts for every pair with max time == tau
        for (r, &(a, t)) in idx.iter().enumerate() {
            for (c, &(b, s)) in idx.iter().enumerate().take(r + 1) {
                if t.max(s) != tau {
                    continue;
                }
                let hz = if t >= 2 && s >= 2 {
                    let mut acc = 0.0;
                    for i in 1..=(t - 1) {
                        for j in 1..=(s - 1) {
                            let (zeta, _) = gru_zeta(
                                &sz,
                                (base[a], i, t - 1),
                                (base[b], j, s - 1),
                                points,
                                seed ^ ((r as u64) << 32 | c as u64),
                                dim_cap,
                            )?;
                            let (ri, cj) = (base[a] + i - 1, base[b] + j - 1);
                            let ephi = verf_pair(sht[(ri, ri)], sht[(ri, cj)], sht[(cj, cj)])
                                .map_err(|e| ArchError::Engine(e.to_string()))?;
                            acc += zeta * ephi;
                        }
                    }
                    sw2 * acc
                } else {
                    0.0 // h^0 = 0
                };
                shz[(r, c)] = hz;
                shz[(c, r)] = hz;
                let z = hz + su2 * dot(tok(a, t), tok(b, s)) / m + sb2;
                sz[(r, c)] = z;
                sz[(c, r)] = z;
            }
        }
        // candidate channel: needs Sigma(r~) at the current times (equal to
        // Sigma(z~)), including the diagonal entries just written
        for (r, &(a, t)) in idx.iter().enumerate() {
            for (c, &(b, s)) in idx.iter().enumerate().take(r + 1) {
                if t.max(s) != tau {
                    continue;
                }
                // E sigma(r~^{ta}) sigma(r~^{sb}) under inflation by I/2
                let mut gate_cov = DMatrix::zeros(2, 2);
                gate_cov[(0, 0)] = sz[(r, r)] + 0.5;
                gate_cov[(1, 1)] = sz[(c, c)] + 0.5;
                gate_cov[(0, 1)] = sz[(r, c)];
                gate_cov[(1, 0)] = sz[(r, c)];
                let mut q = OrthantQuery::new(DVector::zeros(2), gate_cov);
                q.points = points;
                q.seed = seed;
                q.dim_cap = dim_cap;
                let (esig, _) =
                    orthant_probability(&q).map_err(|e| ArchError::Engine(e.to_string()))?;
                let hh = shz[(r, c)] * esig;
                let ht = hh + su2 * dot(tok(a, t), tok(b, s)) / m + sb2;
                sht[(r, c)] = ht;
                sht[(c, r)] = ht;
            }
        }
    }

    // output covariance
    let sv2 = cfg.sigma_v * cfg.sigma_v;
    let mut k = DMatrix::zeros(n, n);
    for (r, &(a, t)) in idx.iter().enumerate() {
        for (c, &(b, s)) in idx.iter().enumerate().take(r + 1) {
            let mut acc = 0.0;
            for i in 1..=t {
                for j in 1..=s {
                    let (zeta, _) = gru_zeta(
                        &sz,
                        (base[a], i, t),
                        (base[b], j, s),
                        points,
                        seed ^ 0x5bd1_e995 ^ ((r as u64) << 32 | c as u64),
                        dim_cap,
                    )?;
                    let (ri, cj) = (base[a] + i - 1, base[b] + j - 1);
                    let ephi = verf_pair(sht[(ri, ri)], sht[(ri, cj)], sht[(cj, cj)])
                        .map_err(|e| ArchError::Engine(e.to_string()))?;
                    acc += zeta * ephi;
                }
            }
            let v = sv2 * acc;
            k[(r, c)] = v;
            k[(c, r)] = v;
        }
    }
    let labels: Vec<String> =
        idx.iter().map(|&(a, t)| format!("t{}_seq{}", t, a + 1)).collect();
    Ok(OutputKernel { labels, readouts: vec!["v".into(); n], k })
}
