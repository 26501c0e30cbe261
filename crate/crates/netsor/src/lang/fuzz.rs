//! Random well-typed program generation for property tests.

use super::ast::{Expr, Output, Program, Statement, VarType};
use crate::nonlin::NonlinRegistry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct FuzzOptions {
    pub body_len: usize,
    /// Allow nonlinearities over H-vars (circle dialect).
    pub allow_circle: bool,
    /// Allow Moment statements and parametrized nonlinearities.
    pub allow_plus: bool,
    pub max_outputs: usize,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions { body_len: 10, allow_circle: false, allow_plus: false, max_outputs: 3 }
    }
}

/// Generate a random well-typed program. Every nonlinearity name resolves in
/// the builtin registry, so the result survives print/parse round trips.
pub fn random_program(seed: u64, opts: &FuzzOptions) -> Program {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = NonlinRegistry::builtin();
    let mut p = Program::new();
    let dim = "n";

    let n_g = rng.gen_range(1..=3);
    let n_a = rng.gen_range(1..=2);
    let mut gvars: Vec<String> = Vec::new(); // usable G-vars
    let mut hvars: Vec<String> = Vec::new(); // strict H-vars
    let mut cvars: Vec<String> = Vec::new();
    let mut avars: Vec<String> = Vec::new();

    for i in 0..n_g {
        let name = format!("g{i}");
        p.statements.push(Statement {
            target: name.clone(),
            expr: Expr::Input,
            ty: VarType::g(dim),
        });
        gvars.push(name);
    }
    for i in 0..n_a {
        let name = format!("W{i}");
        p.statements.push(Statement {
            target: name.clone(),
            expr: Expr::Input,
            ty: VarType::a(dim, dim),
        });
        avars.push(name);
    }

    let unary_names = ["relu", "erf", "tanh", "id", "abs", "sigmoid_erf", "sign"];
    let coeffs = [1.0, -1.0, 0.5, 2.0, -0.25, 1.5];

    let resolve = |p: &mut Program, name: &str| {
        if !p.nonlins.contains_key(name) {
            p.nonlins.insert(name.to_string(), registry.get(name).unwrap().clone());
        }
    };

    for i in 0..opts.body_len {
        let target = format!("x{i}");
        let choice = rng.gen_range(0..100);
        if choice < 30 {
            // LinComb over 1-3 G-vars
            let k = rng.gen_range(1..=3.min(gvars.len()));
            let terms: Vec<(f64, String)> = (0..k)
                .map(|_| {
                    let c = coeffs[rng.gen_range(0..coeffs.len())];
                    let v = gvars[rng.gen_range(0..gvars.len())].clone();
                    (c, v)
                })
                .collect();
            p.statements.push(Statement {
                target: target.clone(),
                expr: Expr::LinComb { terms },
                ty: VarType::g(dim),
            });
            gvars.push(target);
        } else if choice < 60 {
            // Nonlin
            let pool: Vec<String> = if opts.allow_circle && !hvars.is_empty() && rng.gen_bool(0.5)
            {
                gvars.iter().chain(hvars.iter()).cloned().collect()
            } else {
                gvars.clone()
            };
            if opts.allow_plus && !cvars.is_empty() && rng.gen_bool(0.3) {
                let name = "ln_relu";
                resolve(&mut p, name);
                let g = pool[rng.gen_range(0..pool.len())].clone();
                let c1 = cvars[rng.gen_range(0..cvars.len())].clone();
                // the variance parameter must stay positive for the
                // nonlinearity to be parameter-controlled; a constant-one
                // Moment guarantees that
                let one = "cone".to_string();
                if !p.statements.iter().any(|s| s.target == one) {
                    resolve(&mut p, "const1");
                    p.statements.push(Statement {
                        target: one.clone(),
                        expr: Expr::Moment { name: "const1".into(), gvars: vec![], cvars: vec![] },
                        ty: VarType::c(),
                    });
                    cvars.push(one.clone());
                }
                p.statements.push(Statement {
                    target: target.clone(),
                    expr: Expr::Nonlin { name: name.into(), gvars: vec![g], cvars: vec![c1, one] },
                    ty: VarType::h(dim),
                });
            } else if pool.len() >= 2 && rng.gen_bool(0.25) {
                resolve(&mut p, "prod2");
                let a = pool[rng.gen_range(0..pool.len())].clone();
                let b = pool[rng.gen_range(0..pool.len())].clone();
                p.statements.push(Statement {
                    target: target.clone(),
                    expr: Expr::Nonlin { name: "prod2".into(), gvars: vec![a, b], cvars: vec![] },
                    ty: VarType::h(dim),
                });
            } else {
                let name = unary_names[rng.gen_range(0..unary_names.len())];
                resolve(&mut p, name);
                let g = pool[rng.gen_range(0..pool.len())].clone();
                p.statements.push(Statement {
                    target: target.clone(),
                    expr: Expr::Nonlin { name: name.into(), gvars: vec![g], cvars: vec![] },
                    ty: VarType::h(dim),
                });
            }
            hvars.push(target);
        } else if choice < 85 {
            // MatMul over an H- or G-var
            let a = avars[rng.gen_range(0..avars.len())].clone();
            let pool: Vec<&String> = gvars.iter().chain(hvars.iter()).collect();
            let h = pool[rng.gen_range(0..pool.len())].clone();
            p.statements.push(Statement {
                target: target.clone(),
                expr: Expr::MatMul { avar: a, hvar: h },
                ty: VarType::g(dim),
            });
            gvars.push(target);
        } else if opts.allow_plus {
            // Moment over a G-var
            resolve(&mut p, "id");
            let g = gvars[rng.gen_range(0..gvars.len())].clone();
            p.statements.push(Statement {
                target: target.clone(),
                expr: Expr::Moment { name: "id".into(), gvars: vec![g], cvars: vec![] },
                ty: VarType::c(),
            });
            cvars.push(target);
        } else {
            // fall back to an identity nonlin
            resolve(&mut p, "id");
            let g = gvars[rng.gen_range(0..gvars.len())].clone();
            p.statements.push(Statement {
                target: target.clone(),
                expr: Expr::Nonlin { name: "id".into(), gvars: vec![g], cvars: vec![] },
                ty: VarType::h(dim),
            });
            hvars.push(target);
        }
    }

    // outputs read fresh readout inputs against arbitrary vector vars
    let n_out = rng.gen_range(1..=opts.max_outputs);
    let pool: Vec<String> = gvars.iter().chain(hvars.iter()).cloned().collect();
    for k in 0..n_out {
        let v = format!("v{k}");
        p.statements.push(Statement {
            target: v.clone(),
            expr: Expr::Input,
            ty: VarType::g(dim),
        });
        let h = pool[rng.gen_range(0..pool.len())].clone();
        p.outputs.push(Output { readout: v, hvar: h });
    }
    p
}


/// A random sampling spec for a fuzzed program: PSD input covariance from a
/// random low-rank factor, unit-order weight variances.
pub fn random_sampling(
    tp: &super::typecheck::TypedProgram,
    seed: u64,
) -> crate::engine::SamplingSpec {
    use super::ast::{Expr, TypeKind};
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd_1234);
    let mut spec = crate::engine::SamplingSpec::default();
    let readouts: std::collections::HashSet<&str> =
        tp.outputs().iter().map(|o| o.readout.as_str()).collect();
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
    let m = inputs.len();
    let rank = (m / 2 + 1).max(1);
    let factor: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..rank).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    for i in 0..m {
        for j in 0..=i {
            let v: f64 = factor[i].iter().zip(&factor[j]).map(|(a, b)| a * b).sum();
            spec.set_sigma_in(inputs[i], inputs[j], v);
        }
    }
    for a in tp.avars() {
        spec.avar_variance.insert(a.to_string(), rng.gen_range(0.5..1.5));
    }
    for s in &tp.program.statements {
        if s.expr == Expr::Input && s.ty.kind == TypeKind::C {
            spec.theta_in.insert(s.target.clone(), rng.gen_range(-1.0..1.0));
        }
    }
    for r in readouts {
        spec.sigma_v.insert(r.to_string(), rng.gen_range(0.5..1.5));
    }
    spec
}
