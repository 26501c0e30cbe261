//! Scalar nonlinearities as expression trees.
//!
//! A nonlinearity is a scalar function of `arity` vector-slot inputs and
//! `param_arity` scalar parameters. Keeping them as data (rather than
//! closures) buys structural equality for AST round-trips, serialization for
//! the JSON AST export, deterministic fingerprints for expectation
//! memoization, and enough symbolic structure for the kernel engine to
//! pattern-match closed forms and locate integrand kinks.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Primitive unary scalar functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Prim {
    Id,
    Relu,
    Erf,
    /// Derivative of erf: 2/sqrt(pi) * exp(-x^2).
    ErfPrime,
    Tanh,
    /// (1 + erf(x)) / 2, the gate used by the erf-GRU.
    SigmoidErf,
    /// exp(x / sigma).
    Exp { sigma: f64 },
    Sign,
    /// Heaviside step, 1 for x > 0; also the derivative of relu.
    Step,
    Abs,
}

impl Prim {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Prim::Id => x,
            Prim::Relu => {
                if x > 0.0 {
                    x
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Prim::Erf => libm::erf(x),
            Prim::ErfPrime => 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp(),
            Prim::Tanh => x.tanh(),
            Prim::SigmoidErf => 0.5 * (1.0 + libm::erf(x)),
            Prim::Exp { sigma } => (x / sigma).exp(),
            Prim::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Prim::Step => {
                if x > 0.0 {
                    1.0
                } else if x.is_nan() {
                    x
                } else {
                    0.0
                }
            }
            Prim::Abs => x.abs(),
        }
    }

    /// Does the function have a kink (derivative discontinuity) at argument 0?
    pub fn kinked(self) -> bool {
        matches!(self, Prim::Relu | Prim::Sign | Prim::Step | Prim::Abs)
    }
}

/// Scalar expression over argument slots and parameter slots.
///
/// `Sum` and `Prod` evaluate left to right; transforms rely on this to keep
/// finite-width forward semantics bit-identical after substitution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScalarExpr {
    Arg(usize),
    Param(usize),
    Const(f64),
    Neg(Box<ScalarExpr>),
    Sum(Vec<ScalarExpr>),
    Prod(Vec<ScalarExpr>),
    Div(Box<ScalarExpr>, Box<ScalarExpr>),
    Sqrt(Box<ScalarExpr>),
    Apply(Prim, Box<ScalarExpr>),
}

impl ScalarExpr {
    pub fn eval(&self, args: &[f64], params: &[f64]) -> f64 {
        match self {
            ScalarExpr::Arg(i) => args[*i],
            ScalarExpr::Param(j) => params[*j],
            ScalarExpr::Const(c) => *c,
            ScalarExpr::Neg(e) => -e.eval(args, params),
            ScalarExpr::Sum(es) => {
                let mut acc = 0.0;
                for e in es {
                    acc += e.eval(args, params);
                }
                acc
            }
            ScalarExpr::Prod(es) => {
                let mut acc = 1.0;
                for e in es {
                    acc *= e.eval(args, params);
                }
                acc
            }
            ScalarExpr::Div(a, b) => a.eval(args, params) / b.eval(args, params),
            ScalarExpr::Sqrt(e) => e.eval(args, params).sqrt(),
            ScalarExpr::Apply(p, e) => p.eval(e.eval(args, params)),
        }
    }

    /// Largest argument slot referenced, plus one.
    pub fn arity(&self) -> usize {
        match self {
            ScalarExpr::Arg(i) => i + 1,
            ScalarExpr::Param(_) | ScalarExpr::Const(_) => 0,
            ScalarExpr::Neg(e) | ScalarExpr::Sqrt(e) | ScalarExpr::Apply(_, e) => e.arity(),
            ScalarExpr::Sum(es) | ScalarExpr::Prod(es) => es.iter().map(|e| e.arity()).max().unwrap_or(0),
            ScalarExpr::Div(a, b) => a.arity().max(b.arity()),
        }
    }

    /// Largest parameter slot referenced, plus one.
    pub fn param_arity(&self) -> usize {
        match self {
            ScalarExpr::Param(j) => j + 1,
            ScalarExpr::Arg(_) | ScalarExpr::Const(_) => 0,
            ScalarExpr::Neg(e) | ScalarExpr::Sqrt(e) | ScalarExpr::Apply(_, e) => e.param_arity(),
            ScalarExpr::Sum(es) | ScalarExpr::Prod(es) => {
                es.iter().map(|e| e.param_arity()).max().unwrap_or(0)
            }
            ScalarExpr::Div(a, b) => a.param_arity().max(b.param_arity()),
        }
    }

    /// Rewrite argument slots through `map` (slot i becomes `map[i]`).
    pub fn remap_args(&self, map: &[usize]) -> ScalarExpr {
        self.transform(&mut |e| match e {
            ScalarExpr::Arg(i) => Some(ScalarExpr::Arg(map[*i])),
            _ => None,
        })
    }

    /// Substitute each argument slot by the given expression.
    pub fn subst_args(&self, subs: &[ScalarExpr]) -> ScalarExpr {
        self.transform(&mut |e| match e {
            ScalarExpr::Arg(i) => Some(subs[*i].clone()),
            _ => None,
        })
    }

    /// Replace parameter slots by fixed scalar values.
    pub fn resolve_params(&self, params: &[f64]) -> ScalarExpr {
        self.transform(&mut |e| match e {
            ScalarExpr::Param(j) => Some(ScalarExpr::Const(params[*j])),
            _ => None,
        })
    }

    /// Bottom-up rewrite; `f` returns Some(replacement) to rewrite a node
    /// (children already rewritten).
    pub fn transform(&self, f: &mut impl FnMut(&ScalarExpr) -> Option<ScalarExpr>) -> ScalarExpr {
        let rebuilt = match self {
            ScalarExpr::Arg(_) | ScalarExpr::Param(_) | ScalarExpr::Const(_) => self.clone(),
            ScalarExpr::Neg(e) => ScalarExpr::Neg(Box::new(e.transform(f))),
            ScalarExpr::Sum(es) => ScalarExpr::Sum(es.iter().map(|e| e.transform(f)).collect()),
            ScalarExpr::Prod(es) => ScalarExpr::Prod(es.iter().map(|e| e.transform(f)).collect()),
            ScalarExpr::Div(a, b) => {
                ScalarExpr::Div(Box::new(a.transform(f)), Box::new(b.transform(f)))
            }
            ScalarExpr::Sqrt(e) => ScalarExpr::Sqrt(Box::new(e.transform(f))),
            ScalarExpr::Apply(p, e) => ScalarExpr::Apply(*p, Box::new(e.transform(f))),
        };
        f(&rebuilt).unwrap_or(rebuilt)
    }

    /// Constant-fold; assumes parameters already resolved where possible.
    pub fn fold(&self) -> ScalarExpr {
        self.transform(&mut |e| match e {
            ScalarExpr::Neg(i) => i.as_const().map(|c| ScalarExpr::Const(-c)),
            ScalarExpr::Sum(es) => {
                if es.iter().all(|x| x.as_const().is_some()) {
                    Some(ScalarExpr::Const(es.iter().map(|x| x.as_const().unwrap()).sum()))
                } else {
                    None
                }
            }
            ScalarExpr::Prod(es) => {
                if es.iter().all(|x| x.as_const().is_some()) {
                    Some(ScalarExpr::Const(es.iter().map(|x| x.as_const().unwrap()).product()))
                } else if es.iter().any(|x| x.as_const() == Some(0.0)) {
                    Some(ScalarExpr::Const(0.0))
                } else {
                    None
                }
            }
            ScalarExpr::Div(a, b) => match (a.as_const(), b.as_const()) {
                (Some(x), Some(y)) => Some(ScalarExpr::Const(x / y)),
                _ => None,
            },
            ScalarExpr::Sqrt(i) => i.as_const().map(|c| ScalarExpr::Const(c.sqrt())),
            ScalarExpr::Apply(p, i) => i.as_const().map(|c| ScalarExpr::Const(p.eval(c))),
            _ => None,
        })
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            ScalarExpr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Try to read the expression as an affine function of its arguments:
    /// `coeffs . args + c`. Parameters must already be resolved.
    pub fn as_affine(&self, n_args: usize) -> Option<(Vec<f64>, f64)> {
        match self {
            ScalarExpr::Arg(i) => {
                let mut v = vec![0.0; n_args];
                v[*i] = 1.0;
                Some((v, 0.0))
            }
            ScalarExpr::Const(c) => Some((vec![0.0; n_args], *c)),
            ScalarExpr::Param(_) => None,
            ScalarExpr::Neg(e) => {
                let (mut v, c) = e.as_affine(n_args)?;
                v.iter_mut().for_each(|x| *x = -*x);
                Some((v, -c))
            }
            ScalarExpr::Sum(es) => {
                let mut v = vec![0.0; n_args];
                let mut c = 0.0;
                for e in es {
                    let (ev, ec) = e.as_affine(n_args)?;
                    for (a, b) in v.iter_mut().zip(&ev) {
                        *a += b;
                    }
                    c += ec;
                }
                Some((v, c))
            }
            ScalarExpr::Prod(es) => {
                let mut scale = 1.0;
                let mut aff: Option<(Vec<f64>, f64)> = None;
                for e in es {
                    if let Some(k) = e.fold().as_const() {
                        scale *= k;
                    } else {
                        let a = e.as_affine(n_args)?;
                        if aff.is_some() {
                            return None; // product of two non-constant affines is quadratic
                        }
                        aff = Some(a);
                    }
                }
                match aff {
                    None => Some((vec![0.0; n_args], scale)),
                    Some((mut v, c)) => {
                        v.iter_mut().for_each(|x| *x *= scale);
                        Some((v, c * scale))
                    }
                }
            }
            ScalarExpr::Div(a, b) => {
                let k = b.fold().as_const()?;
                let (mut v, c) = a.as_affine(n_args)?;
                v.iter_mut().for_each(|x| *x /= k);
                Some((v, c / k))
            }
            ScalarExpr::Sqrt(e) => e.fold().as_const().map(|c| (vec![0.0; n_args], c.sqrt())),
            ScalarExpr::Apply(Prim::Id, e) => e.as_affine(n_args),
            ScalarExpr::Apply(p, e) => {
                // constant argument folds to a constant
                let c = e.fold().as_const()?;
                Some((vec![0.0; n_args], p.eval(c)))
            }
        }
    }

    /// Affine functionals `c + v . args` at whose zero sets the expression has
    /// a kink. Used to split quadrature panels; extra functionals are
    /// harmless.
    pub fn kink_functionals(&self, n_args: usize, out: &mut Vec<(Vec<f64>, f64)>) {
        match self {
            ScalarExpr::Arg(_) | ScalarExpr::Param(_) | ScalarExpr::Const(_) => {}
            ScalarExpr::Neg(e) | ScalarExpr::Sqrt(e) => e.kink_functionals(n_args, out),
            ScalarExpr::Sum(es) | ScalarExpr::Prod(es) => {
                for e in es {
                    e.kink_functionals(n_args, out);
                }
            }
            ScalarExpr::Div(a, b) => {
                a.kink_functionals(n_args, out);
                b.kink_functionals(n_args, out);
            }
            ScalarExpr::Apply(p, e) => {
                if p.kinked() {
                    // kink where the argument crosses zero; look through a
                    // positive denominator
                    let target = match &**e {
                        ScalarExpr::Div(num, _) => num,
                        _ => e,
                    };
                    if let Some((v, c)) = target.as_affine(n_args) {
                        if v.iter().any(|&x| x != 0.0) {
                            out.push((v, c));
                        }
                    }
                }
                e.kink_functionals(n_args, out);
            }
        }
    }

    /// Deterministic byte encoding used for memoization keys.
    pub fn encode(&self, out: &mut Vec<u8>) {
        match self {
            ScalarExpr::Arg(i) => {
                out.push(1);
                out.extend((*i as u32).to_le_bytes());
            }
            ScalarExpr::Param(j) => {
                out.push(2);
                out.extend((*j as u32).to_le_bytes());
            }
            ScalarExpr::Const(c) => {
                out.push(3);
                out.extend(c.to_bits().to_le_bytes());
            }
            ScalarExpr::Neg(e) => {
                out.push(4);
                e.encode(out);
            }
            ScalarExpr::Sum(es) => {
                out.push(5);
                out.extend((es.len() as u32).to_le_bytes());
                es.iter().for_each(|e| e.encode(out));
            }
            ScalarExpr::Prod(es) => {
                out.push(6);
                out.extend((es.len() as u32).to_le_bytes());
                es.iter().for_each(|e| e.encode(out));
            }
            ScalarExpr::Div(a, b) => {
                out.push(7);
                a.encode(out);
                b.encode(out);
            }
            ScalarExpr::Sqrt(e) => {
                out.push(8);
                e.encode(out);
            }
            ScalarExpr::Apply(p, e) => {
                out.push(9);
                match p {
                    Prim::Id => out.push(0),
                    Prim::Relu => out.push(1),
                    Prim::Erf => out.push(2),
                    Prim::ErfPrime => out.push(3),
                    Prim::Tanh => out.push(4),
                    Prim::SigmoidErf => out.push(5),
                    Prim::Exp { sigma } => {
                        out.push(6);
                        out.extend(sigma.to_bits().to_le_bytes());
                    }
                    Prim::Sign => out.push(7),
                    Prim::Step => out.push(8),
                    Prim::Abs => out.push(9),
                }
                e.encode(out);
            }
        }
    }
}

/// Convenience constructors.
pub fn arg(i: usize) -> ScalarExpr {
    ScalarExpr::Arg(i)
}
pub fn cnst(c: f64) -> ScalarExpr {
    ScalarExpr::Const(c)
}
pub fn apply(p: Prim, e: ScalarExpr) -> ScalarExpr {
    ScalarExpr::Apply(p, Box::new(e))
}
/// Affine combination `sum_i coeffs[i] * exprs[i]`; coefficient 1 terms skip
/// the multiplication so substitution preserves bit-level semantics.
pub fn affine(terms: Vec<(f64, ScalarExpr)>) -> ScalarExpr {
    let es: Vec<ScalarExpr> = terms
        .into_iter()
        .map(|(c, e)| {
            if c == 1.0 {
                e
            } else {
                ScalarExpr::Prod(vec![cnst(c), e])
            }
        })
        .collect();
    if es.len() == 1 {
        es.into_iter().next().unwrap()
    } else {
        ScalarExpr::Sum(es)
    }
}

/// A named nonlinearity: scalar evaluator over `arity` vector slots and
/// `param_arity` scalar parameter slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinSpec {
    pub name: String,
    pub arity: usize,
    pub param_arity: usize,
    pub expr: ScalarExpr,
}

impl NonlinSpec {
    pub fn new(name: impl Into<String>, arity: usize, param_arity: usize, expr: ScalarExpr) -> Self {
        let spec = NonlinSpec { name: name.into(), arity, param_arity, expr };
        debug_assert!(spec.expr.arity() <= spec.arity);
        debug_assert!(spec.expr.param_arity() <= spec.param_arity);
        spec
    }

    pub fn eval(&self, args: &[f64], params: &[f64]) -> f64 {
        self.expr.eval(args, params)
    }
}

/// Name registry the parser resolves against. Starts with the builtins; user
/// code may register additional entries before parsing.
#[derive(Debug, Clone)]
pub struct NonlinRegistry {
    entries: BTreeMap<String, NonlinSpec>,
}

impl Default for NonlinRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl NonlinRegistry {
    pub fn empty() -> Self {
        NonlinRegistry { entries: BTreeMap::new() }
    }

    pub fn builtin() -> Self {
        let mut r = NonlinRegistry::empty();
        let unary = |p: Prim| apply(p, arg(0));
        r.register(NonlinSpec::new("id", 1, 0, unary(Prim::Id)));
        r.register(NonlinSpec::new("relu", 1, 0, unary(Prim::Relu)));
        r.register(NonlinSpec::new("relu_prime", 1, 0, unary(Prim::Step)));
        r.register(NonlinSpec::new("erf", 1, 0, unary(Prim::Erf)));
        r.register(NonlinSpec::new("erf_prime", 1, 0, unary(Prim::ErfPrime)));
        r.register(NonlinSpec::new("tanh", 1, 0, unary(Prim::Tanh)));
        r.register(NonlinSpec::new("sigmoid_erf", 1, 0, unary(Prim::SigmoidErf)));
        r.register(NonlinSpec::new("exp", 1, 0, unary(Prim::Exp { sigma: 1.0 })));
        r.register(NonlinSpec::new("sign", 1, 0, unary(Prim::Sign)));
        r.register(NonlinSpec::new("step", 1, 0, unary(Prim::Step)));
        r.register(NonlinSpec::new("abs", 1, 0, unary(Prim::Abs)));
        r.register(NonlinSpec::new("square", 1, 0, ScalarExpr::Prod(vec![arg(0), arg(0)])));
        r.register(NonlinSpec::new("const1", 0, 0, cnst(1.0)));
        r.register(NonlinSpec::new("prod2", 2, 0, ScalarExpr::Prod(vec![arg(0), arg(1)])));
        // z^2 - theta^2: the variance accumulator used by layernorm moments
        r.register(NonlinSpec::new(
            "sq_sub_sq",
            1,
            1,
            ScalarExpr::Sum(vec![
                ScalarExpr::Prod(vec![arg(0), arg(0)]),
                ScalarExpr::Neg(Box::new(ScalarExpr::Prod(vec![
                    ScalarExpr::Param(0),
                    ScalarExpr::Param(0),
                ]))),
            ]),
        ));
        // layernorm cores: (z - theta0) / sqrt(theta1), optionally through relu
        let ln_core = ScalarExpr::Div(
            Box::new(ScalarExpr::Sum(vec![arg(0), ScalarExpr::Neg(Box::new(ScalarExpr::Param(0)))])),
            Box::new(ScalarExpr::Sqrt(Box::new(ScalarExpr::Param(1)))),
        );
        r.register(NonlinSpec::new("ln_id", 1, 2, ln_core.clone()));
        r.register(NonlinSpec::new("ln_relu", 1, 2, ScalarExpr::Apply(Prim::Relu, Box::new(ln_core))));
        r
    }

    pub fn register(&mut self, spec: NonlinSpec) {
        self.entries.insert(spec.name.clone(), spec);
    }

    pub fn get(&self, name: &str) -> Option<&NonlinSpec> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn builtin_evaluators() {
        let r = NonlinRegistry::builtin();
        assert_eq!(r.get("relu").unwrap().eval(&[-2.0], &[]), 0.0);
        assert_eq!(r.get("relu").unwrap().eval(&[3.5], &[]), 3.5);
        assert_abs_diff_eq!(r.get("sigmoid_erf").unwrap().eval(&[0.0], &[]), 0.5);
        assert_eq!(r.get("const1").unwrap().eval(&[], &[]), 1.0);
        assert_eq!(r.get("prod2").unwrap().eval(&[2.0, -4.0], &[]), -8.0);
        assert_abs_diff_eq!(r.get("ln_relu").unwrap().eval(&[3.0], &[1.0, 4.0]), 1.0);
        assert_eq!(r.get("sq_sub_sq").unwrap().eval(&[3.0], &[1.0]), 8.0);
    }

    #[test]
    fn affine_analysis() {
        // 2*x0 - x1/2 + 3
        let e = ScalarExpr::Sum(vec![
            ScalarExpr::Prod(vec![cnst(2.0), arg(0)]),
            ScalarExpr::Neg(Box::new(ScalarExpr::Div(Box::new(arg(1)), Box::new(cnst(2.0))))),
            cnst(3.0),
        ]);
        let (v, c) = e.as_affine(2).unwrap();
        assert_eq!(v, vec![2.0, -0.5]);
        assert_eq!(c, 3.0);
        assert!(apply(Prim::Relu, arg(0)).as_affine(1).is_none());
    }

    #[test]
    fn substitution_matches_composition() {
        // phi(psi(a,b), c) with phi = relu(x0)*x1, psi = a+b
        let psi = ScalarExpr::Sum(vec![arg(0), arg(1)]);
        let phi = ScalarExpr::Prod(vec![apply(Prim::Relu, arg(0)), arg(1)]);
        let composite = phi.subst_args(&[psi.clone(), arg(2)]);
        for &(a, b, c) in &[(0.3, -0.8, 2.0), (1.5, 0.25, -1.0)] {
            let direct = phi.eval(&[psi.eval(&[a, b], &[]), c], &[]);
            let subst = composite.eval(&[a, b, c], &[]);
            assert_eq!(direct.to_bits(), subst.to_bits());
        }
    }

    #[test]
    fn kinks_found_through_division() {
        let r = NonlinRegistry::builtin();
        let e = r.get("ln_relu").unwrap().expr.resolve_params(&[0.5, 2.0]);
        let mut ks = Vec::new();
        e.kink_functionals(1, &mut ks);
        assert_eq!(ks.len(), 1);
        let (v, c) = &ks[0];
        // kink where z - 0.5 = 0
        assert_eq!(v, &vec![1.0]);
        assert_eq!(*c, -0.5);
    }
}
