//! Abstract syntax for straight-line tensor programs.

use crate::nonlin::NonlinSpec;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Variable kinds. `G` is a subtype of `H`: anywhere an H-var is accepted, a
/// G-var may appear.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TypeKind {
    G,
    H,
    A,
    C,
}

/// A kind plus its dimension symbols: two for A, one for G/H, none for C.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarType {
    pub kind: TypeKind,
    pub dims: Vec<String>,
}

impl VarType {
    pub fn g(dim: impl Into<String>) -> Self {
        VarType { kind: TypeKind::G, dims: vec![dim.into()] }
    }
    pub fn h(dim: impl Into<String>) -> Self {
        VarType { kind: TypeKind::H, dims: vec![dim.into()] }
    }
    pub fn a(rows: impl Into<String>, cols: impl Into<String>) -> Self {
        VarType { kind: TypeKind::A, dims: vec![rows.into(), cols.into()] }
    }
    pub fn c() -> Self {
        VarType { kind: TypeKind::C, dims: vec![] }
    }

    /// Number of dimension symbols the kind must carry.
    pub fn expected_dims(kind: TypeKind) -> usize {
        match kind {
            TypeKind::A => 2,
            TypeKind::G | TypeKind::H => 1,
            TypeKind::C => 0,
        }
    }
}

/// Right-hand sides of statements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    /// Input declaration; carries no expression.
    Input,
    /// Matrix-vector product of an A-var and an H-var.
    MatMul { avar: String, hvar: String },
    /// Linear combination of G-vars with real coefficients.
    LinComb { terms: Vec<(f64, String)> },
    /// Coordinatewise nonlinearity over G-vars (H-vars in the circle
    /// dialects), optionally parametrized by C-vars.
    Nonlin { name: String, gvars: Vec<String>, cvars: Vec<String> },
    /// Empirical average of a parametrized function of G-vars: a C-var.
    Moment { name: String, gvars: Vec<String>, cvars: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statement {
    pub target: String,
    pub expr: Expr,
    pub ty: VarType,
}

/// One scalar output `readout^T hvar / sqrt(n)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Output {
    pub readout: String,
    pub hvar: String,
}

/// Language dialects, ordered by feature set rather than expressiveness (all
/// are semantically inter-convertible).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dialect {
    /// No LinComb.
    NetsorMinus,
    Netsor,
    /// Moments / parametrized nonlinearities present.
    NetsorPlus,
    /// Some nonlinearity consumes an H-var.
    NetsorCircle,
    NetsorCirclePlus,
}

impl std::fmt::Display for Dialect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Dialect::NetsorMinus => "netsor-",
            Dialect::Netsor => "netsor",
            Dialect::NetsorPlus => "netsor+",
            Dialect::NetsorCircle => "netsor o",
            Dialect::NetsorCirclePlus => "netsor o+",
        };
        f.write_str(s)
    }
}

/// A straight-line program: ordered statements, outputs, and the definitions
/// of every nonlinearity the statements reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Program {
    pub statements: Vec<Statement>,
    pub outputs: Vec<Output>,
    pub nonlins: BTreeMap<String, NonlinSpec>,
}

impl Program {
    pub fn new() -> Self {
        Program { statements: Vec::new(), outputs: Vec::new(), nonlins: BTreeMap::new() }
    }

    pub fn find(&self, name: &str) -> Option<&Statement> {
        self.statements.iter().find(|s| s.target == name)
    }

    /// Syntactic dialect from annotations alone (no scoping checks).
    pub fn dialect(&self) -> Dialect {
        let mut has_lincomb = false;
        let mut has_plus = false;
        let mut has_circle = false;
        let kind_of = |name: &str| self.find(name).map(|s| s.ty.kind);
        for s in &self.statements {
            match &s.expr {
                Expr::LinComb { .. } => has_lincomb = true,
                Expr::Moment { .. } => has_plus = true,
                Expr::Nonlin { gvars, cvars, .. } => {
                    if !cvars.is_empty() {
                        has_plus = true;
                    }
                    if gvars.iter().any(|v| kind_of(v) == Some(TypeKind::H)) {
                        has_circle = true;
                    }
                }
                Expr::Input if s.ty.kind == TypeKind::C => has_plus = true,
                _ => {}
            }
        }
        match (has_circle, has_plus, has_lincomb) {
            (true, true, _) => Dialect::NetsorCirclePlus,
            (true, false, _) => Dialect::NetsorCircle,
            (false, true, _) => Dialect::NetsorPlus,
            (false, false, true) => Dialect::Netsor,
            (false, false, false) => Dialect::NetsorMinus,
        }
    }

    /// JSON AST export with stable field ordering.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("program serializes")
    }

    pub fn from_json(text: &str) -> Result<Program, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl Default for Program {
    fn default() -> Self {
        Self::new()
    }
}

/// Structural equality up to a renaming of variables (and of dimension
/// symbols). Statement order, coefficients, nonlinearity definitions, and
/// outputs must match.
pub fn alpha_equivalent(p1: &Program, p2: &Program) -> bool {
    if p1.statements.len() != p2.statements.len() || p1.outputs.len() != p2.outputs.len() {
        return false;
    }
    let mut vmap: BTreeMap<&str, &str> = BTreeMap::new();
    let mut dmap: BTreeMap<&str, &str> = BTreeMap::new();
    fn tie<'a>(map: &mut BTreeMap<&'a str, &'a str>, a: &'a str, b: &'a str) -> bool {
        match map.get(a) {
            Some(&prev) => prev == b,
            None => {
                map.insert(a, b);
                true
            }
        }
    }
    for (s1, s2) in p1.statements.iter().zip(&p2.statements) {
        if s1.ty.kind != s2.ty.kind || s1.ty.dims.len() != s2.ty.dims.len() {
            return false;
        }
        for (d1, d2) in s1.ty.dims.iter().zip(&s2.ty.dims) {
            if !tie(&mut dmap, d1, d2) {
                return false;
            }
        }
        if !tie(&mut vmap, &s1.target, &s2.target) {
            return false;
        }
        let ok = match (&s1.expr, &s2.expr) {
            (Expr::Input, Expr::Input) => true,
            (Expr::MatMul { avar: a1, hvar: h1 }, Expr::MatMul { avar: a2, hvar: h2 }) => {
                tie(&mut vmap, a1, a2) && tie(&mut vmap, h1, h2)
            }
            (Expr::LinComb { terms: t1 }, Expr::LinComb { terms: t2 }) => {
                t1.len() == t2.len()
                    && t1.iter().zip(t2).all(|((c1, v1), (c2, v2))| {
                        c1 == c2 && tie(&mut vmap, v1, v2)
                    })
            }
            (
                Expr::Nonlin { name: n1, gvars: g1, cvars: c1 },
                Expr::Nonlin { name: n2, gvars: g2, cvars: c2 },
            )
            | (
                Expr::Moment { name: n1, gvars: g1, cvars: c1 },
                Expr::Moment { name: n2, gvars: g2, cvars: c2 },
            ) => {
                // nonlinearities compare by definition, not by name
                let d1 = p1.nonlins.get(n1);
                let d2 = p2.nonlins.get(n2);
                let defs_match = match (d1, d2) {
                    (Some(a), Some(b)) => {
                        a.arity == b.arity && a.param_arity == b.param_arity && a.expr == b.expr
                    }
                    _ => false,
                };
                defs_match
                    && g1.len() == g2.len()
                    && c1.len() == c2.len()
                    && g1.iter().zip(g2).all(|(v1, v2)| tie(&mut vmap, v1, v2))
                    && c1.iter().zip(c2).all(|(v1, v2)| tie(&mut vmap, v1, v2))
            }
            _ => false,
        };
        if !ok {
            return false;
        }
    }
    p1.outputs.iter().zip(&p2.outputs).all(|(o1, o2)| {
        tie(&mut vmap, &o1.readout, &o2.readout) && tie(&mut vmap, &o1.hvar, &o2.hvar)
    })
}
