//! Type checking: scoping, kind rules, dimension unification, readout
//! discipline, and dialect inference.

use super::ast::{Dialect, Expr, Output, Program, Statement, TypeKind, VarType};
use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeErrorKind {
    Redeclaration,
    UseBeforeDeclaration,
    KindMismatch,
    DimensionMismatch,
    ArityMismatch,
    MalformedAnnotation,
    UnknownNonlin,
    ReadoutViolation,
    DimensionsNotUnified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeError {
    /// Statement index the error is attached to, if any.
    pub statement: Option<usize>,
    pub kind: TypeErrorKind,
    pub message: String,
}

impl fmt::Display for TypeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.statement {
            Some(i) => write!(f, "statement {}: {}", i + 1, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

impl std::error::Error for TypeError {}

/// A program that passed all checks, with its inferred dialect and the single
/// unified dimension symbol.
#[derive(Debug, Clone)]
pub struct TypedProgram {
    pub program: Program,
    pub dialect: Dialect,
    pub dim_symbol: String,
    index: HashMap<String, usize>,
}

impl TypedProgram {
    pub fn stmt(&self, name: &str) -> Option<&Statement> {
        self.index.get(name).map(|&i| &self.program.statements[i])
    }

    pub fn stmt_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn kind(&self, name: &str) -> Option<TypeKind> {
        self.stmt(name).map(|s| s.ty.kind)
    }

    /// G-var names in order of appearance.
    pub fn gvars(&self) -> Vec<&str> {
        self.program
            .statements
            .iter()
            .filter(|s| s.ty.kind == TypeKind::G)
            .map(|s| s.target.as_str())
            .collect()
    }

    /// Input A-var names in order of appearance.
    pub fn avars(&self) -> Vec<&str> {
        self.program
            .statements
            .iter()
            .filter(|s| s.ty.kind == TypeKind::A)
            .map(|s| s.target.as_str())
            .collect()
    }

    pub fn outputs(&self) -> &[Output] {
        &self.program.outputs
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }
    fn add(&mut self) -> usize {
        self.parent.push(self.parent.len());
        self.parent.len() - 1
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

pub fn typecheck(program: &Program) -> Result<TypedProgram, Vec<TypeError>> {
    let mut errors: Vec<TypeError> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut dims = UnionFind::new();
    let mut dim_ids: HashMap<String, usize> = HashMap::new();
    let mut dim_names: Vec<String> = Vec::new();

    let mut has_lincomb = false;
    let mut has_plus = false;
    let mut has_circle = false;

    macro_rules! bail {
        ($errs:expr, $i:expr, $kind:expr, $($arg:tt)*) => {
            $errs.push(TypeError { statement: $i, kind: $kind, message: format!($($arg)*) })
        };
    }

    let dim_id = |sym: &str,
                      dims: &mut UnionFind,
                      dim_ids: &mut HashMap<String, usize>,
                      dim_names: &mut Vec<String>| {
        *dim_ids.entry(sym.to_string()).or_insert_with(|| {
            dim_names.push(sym.to_string());
            dims.add()
        })
    };

    for (i, s) in program.statements.iter().enumerate() {
        // annotation shape
        if s.ty.dims.len() != VarType::expected_dims(s.ty.kind) {
            bail!(
                errors,
                Some(i),
                TypeErrorKind::MalformedAnnotation,
                "`{}` annotated {:?} with {} dimension symbol(s)",
                s.target,
                s.ty.kind,
                s.ty.dims.len()
            );
            continue;
        }
        for d in &s.ty.dims {
            dim_id(d, &mut dims, &mut dim_ids, &mut dim_names);
        }

        // resolves a referenced variable, enforcing straight-line scoping
        let lookup = |name: &str, errors: &mut Vec<TypeError>| -> Option<&Statement> {
            match index.get(name) {
                Some(&j) => Some(&program.statements[j]),
                None => {
                    bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::UseBeforeDeclaration,
                        "`{name}` used before declaration"
                    );
                    None
                }
            }
        };

        match &s.expr {
            Expr::Input => {
                if s.ty.kind == TypeKind::H {
                    bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::KindMismatch,
                        "input `{}` may be G, A, or C, not H",
                        s.target
                    );
                }
            }
            Expr::MatMul { avar, hvar } => {
                if s.ty.kind != TypeKind::G {
                    bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::KindMismatch,
                        "`{}`: MatMul yields G by the inference rule `MatMul(A(n1,n2), H(n2)) : G(n1)`, not {:?}",
                        s.target,
                        s.ty.kind
                    );
                }
                let a = lookup(avar, &mut errors).cloned();
                let h = lookup(hvar, &mut errors).cloned();
                if let Some(a) = &a {
                    if a.ty.kind != TypeKind::A {
                        bail!(
                            errors,
                            Some(i),
                            TypeErrorKind::KindMismatch,
                            "MatMul first argument `{avar}` must be an A-var, found {:?}",
                            a.ty.kind
                        );
                    }
                }
                if let Some(h) = &h {
                    if !matches!(h.ty.kind, TypeKind::G | TypeKind::H) {
                        bail!(
                            errors,
                            Some(i),
                            TypeErrorKind::KindMismatch,
                            "MatMul second argument `{hvar}` must be H (or G by subtyping), found {:?}",
                            h.ty.kind
                        );
                    }
                }
                if let (Some(a), Some(h)) = (&a, &h) {
                    if a.ty.kind == TypeKind::A && s.ty.kind == TypeKind::G {
                        let rows = dim_id(&a.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                        let cols = dim_id(&a.ty.dims[1], &mut dims, &mut dim_ids, &mut dim_names);
                        let tgt = dim_id(&s.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                        dims.union(rows, tgt);
                        if matches!(h.ty.kind, TypeKind::G | TypeKind::H) {
                            let hd = dim_id(&h.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                            dims.union(cols, hd);
                        }
                    }
                }
            }
            Expr::LinComb { terms } => {
                has_lincomb = true;
                if s.ty.kind != TypeKind::G {
                    bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::KindMismatch,
                        "`{}`: LinComb of G-vars yields G, not {:?}",
                        s.target,
                        s.ty.kind
                    );
                }
                if terms.is_empty() {
                    bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::ArityMismatch,
                        "`{}`: LinComb needs at least one term",
                        s.target
                    );
                }
                let tgt = dim_id(&s.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                for (_, v) in terms {
                    if let Some(d) = lookup(v, &mut errors).cloned() {
                        if d.ty.kind != TypeKind::G {
                            bail!(
                                errors,
                                Some(i),
                                TypeErrorKind::KindMismatch,
                                "LinComb argument `{v}` must be a G-var, found {:?}",
                                d.ty.kind
                            );
                        } else {
                            let vd = dim_id(&d.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                            dims.union(tgt, vd);
                        }
                    }
                }
            }
            Expr::Nonlin { name, gvars, cvars } | Expr::Moment { name, gvars, cvars } => {
                let is_moment = matches!(s.expr, Expr::Moment { .. });
                if is_moment {
                    has_plus = true;
                    if s.ty.kind != TypeKind::C {
                        bail!(
                            errors,
                            Some(i),
                            TypeErrorKind::KindMismatch,
                            "`{}`: Moment yields a C-var, not {:?}",
                            s.target,
                            s.ty.kind
                        );
                    }
                } else {
                    if !cvars.is_empty() {
                        has_plus = true;
                    }
                    if s.ty.kind != TypeKind::H {
                        bail!(
                            errors,
                            Some(i),
                            TypeErrorKind::KindMismatch,
                            "`{}`: a nonlinearity yields H by the inference rule, not {:?}",
                            s.target,
                            s.ty.kind
                        );
                    }
                }
                match program.nonlins.get(name) {
                    None => bail!(
                        errors,
                        Some(i),
                        TypeErrorKind::UnknownNonlin,
                        "nonlinearity `{name}` has no definition attached to the program"
                    ),
                    Some(spec) => {
                        if spec.arity != gvars.len() || spec.param_arity != cvars.len() {
                            bail!(
                                errors,
                                Some(i),
                                TypeErrorKind::ArityMismatch,
                                "`{name}` expects {} vector and {} scalar arguments, got {} and {}",
                                spec.arity,
                                spec.param_arity,
                                gvars.len(),
                                cvars.len()
                            );
                        }
                    }
                }
                let tgt = if s.ty.kind == TypeKind::C {
                    None
                } else {
                    Some(dim_id(&s.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names))
                };
                for v in gvars {
                    if let Some(d) = lookup(v, &mut errors).cloned() {
                        match d.ty.kind {
                            TypeKind::G => {}
                            TypeKind::H if !is_moment => has_circle = true,
                            _ => bail!(
                                errors,
                                Some(i),
                                TypeErrorKind::KindMismatch,
                                "vector argument `{v}` must be a G-var{}, found {:?}",
                                if is_moment { "" } else { " (or H in the circle dialects)" },
                                d.ty.kind
                            ),
                        }
                        if matches!(d.ty.kind, TypeKind::G | TypeKind::H) {
                            let vd = dim_id(&d.ty.dims[0], &mut dims, &mut dim_ids, &mut dim_names);
                            if let Some(t) = tgt {
                                dims.union(t, vd);
                            }
                        }
                    }
                }
                for v in cvars {
                    if let Some(d) = lookup(v, &mut errors).cloned() {
                        if d.ty.kind != TypeKind::C {
                            bail!(
                                errors,
                                Some(i),
                                TypeErrorKind::KindMismatch,
                                "parameter `{v}` must be a C-var, found {:?}",
                                d.ty.kind
                            );
                        }
                    }
                }
            }
        }

        if index.insert(s.target.clone(), i).is_some() {
            bail!(
                errors,
                Some(i),
                TypeErrorKind::Redeclaration,
                "`{}` declared more than once",
                s.target
            );
        }
        if s.ty.kind == TypeKind::C && s.expr != Expr::Input && !matches!(s.expr, Expr::Moment { .. })
        {
            bail!(
                errors,
                Some(i),
                TypeErrorKind::KindMismatch,
                "`{}`: only inputs and Moments may have type C",
                s.target
            );
        }
    }

    // outputs: readout must be an input G-var unused in the body
    let used_in_body: std::collections::HashSet<&str> = program
        .statements
        .iter()
        .flat_map(|s| match &s.expr {
            Expr::Input => vec![],
            Expr::MatMul { avar, hvar } => vec![avar.as_str(), hvar.as_str()],
            Expr::LinComb { terms } => terms.iter().map(|(_, v)| v.as_str()).collect(),
            Expr::Nonlin { gvars, cvars, .. } | Expr::Moment { gvars, cvars, .. } => {
                gvars.iter().chain(cvars.iter()).map(|v| v.as_str()).collect()
            }
        })
        .collect();
    for (oi, o) in program.outputs.iter().enumerate() {
        match index.get(&o.readout) {
            None => bail!(
                errors,
                None,
                TypeErrorKind::UseBeforeDeclaration,
                "output {}: readout `{}` is not declared",
                oi + 1,
                o.readout
            ),
            Some(&j) => {
                let st = &program.statements[j];
                if st.expr != Expr::Input || st.ty.kind != TypeKind::G {
                    bail!(
                        errors,
                        None,
                        TypeErrorKind::ReadoutViolation,
                        "output {}: readout `{}` must be an input G-var",
                        oi + 1,
                        o.readout
                    );
                }
                if used_in_body.contains(o.readout.as_str()) {
                    bail!(
                        errors,
                        None,
                        TypeErrorKind::ReadoutViolation,
                        "output {}: readout `{}` is used in the program body",
                        oi + 1,
                        o.readout
                    );
                }
            }
        }
        match index.get(&o.hvar) {
            None => bail!(
                errors,
                None,
                TypeErrorKind::UseBeforeDeclaration,
                "output {}: variable `{}` is not declared",
                oi + 1,
                o.hvar
            ),
            Some(&j) => {
                let st = &program.statements[j];
                if !matches!(st.ty.kind, TypeKind::G | TypeKind::H) {
                    bail!(
                        errors,
                        None,
                        TypeErrorKind::KindMismatch,
                        "output {}: `{}` must be an H-var (or G by subtyping)",
                        oi + 1,
                        o.hvar
                    );
                }
                if o.hvar == o.readout {
                    bail!(
                        errors,
                        None,
                        TypeErrorKind::ReadoutViolation,
                        "output {}: readout `{}` cannot also be the output vector",
                        oi + 1,
                        o.readout
                    );
                }
            }
        }
    }

    // all dimension symbols must collapse to a single class
    let mut roots: Vec<usize> = (0..dim_names.len()).map(|i| dims.find(i)).collect();
    roots.sort_unstable();
    roots.dedup();
    if roots.len() > 1 {
        let names: Vec<&str> = roots.iter().map(|&r| dim_names[r].as_str()).collect();
        bail!(
            errors,
            None,
            TypeErrorKind::DimensionsNotUnified,
            "dimension symbols do not unify to a single class: {} remain (e.g. {})",
            roots.len(),
            names.join(", ")
        );
    }

    if !errors.is_empty() {
        return Err(errors);
    }

    let dialect = match (has_circle, has_plus, has_lincomb) {
        (true, true, _) => Dialect::NetsorCirclePlus,
        (true, false, _) => Dialect::NetsorCircle,
        (false, true, _) => Dialect::NetsorPlus,
        (false, false, true) => Dialect::Netsor,
        (false, false, false) => Dialect::NetsorMinus,
    };
    let dim_symbol = dim_names.first().cloned().unwrap_or_else(|| "n".to_string());
    Ok(TypedProgram { program: program.clone(), dialect, dim_symbol, index })
}

#[cfg(test)]
mod tests {
    use super::super::parser::parse_program;
    use super::*;

    fn check(src: &str) -> Result<TypedProgram, Vec<TypeError>> {
        typecheck(&parse_program(src).unwrap())
    }

    #[test]
    fn mlp_types() {
        let src = "\
Input W1x :: G(n)
Input b1 :: G(n)
Input W2 :: A(n, n)
Input b2 :: G(n)
Input v :: G(n)
h1 := W1x + b1 :: G(n)
x1 := relu(h1) :: H(n)
ht2 := MatMul(W2, x1) :: G(n)
h2 := ht2 + b2 :: G(n)
x2 := relu(h2) :: H(n)
Output v * x2
";
        let tp = check(src).unwrap();
        assert_eq!(tp.dialect, Dialect::Netsor);
        assert_eq!(tp.gvars(), vec!["W1x", "b1", "b2", "v", "h1", "ht2", "h2"]);
    }

    #[test]
    fn matmul_annotated_h_is_rejected() {
        let src = "\
Input W :: A(n, n)
Input g :: G(n)
y := MatMul(W, g) :: H(n)
";
        let errs = check(src).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == TypeErrorKind::KindMismatch
            && e.message.contains("MatMul yields G")));
    }

    #[test]
    fn dimension_unification_failure() {
        let src = "\
Input a :: G(n)
Input b :: G(m)
";
        let errs = check(src).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == TypeErrorKind::DimensionsNotUnified));
    }

    #[test]
    fn readout_reuse_rejected() {
        let src = "\
Input v :: G(n)
Input g :: G(n)
h := v + g :: G(n)
x := relu(h) :: H(n)
Output v * x
";
        let errs = check(src).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == TypeErrorKind::ReadoutViolation));
    }

    #[test]
    fn duplicate_readout_outputs_allowed() {
        let src = "\
Input v :: G(n)
Input g :: G(n)
x := relu(g) :: H(n)
y := erf(g) :: H(n)
Output v * x
Output v * y
Output v * x
";
        assert!(check(src).is_ok());
    }

    #[test]
    fn circle_dialect_detected() {
        let src = "\
Input g :: G(n)
h := relu(g) :: H(n)
k := erf(h) :: H(n)
";
        let tp = check(src).unwrap();
        assert_eq!(tp.dialect, Dialect::NetsorCircle);
    }

    #[test]
    fn cvar_where_gvar_required() {
        let src = "\
Input g :: G(n)
c := Moment(id; g) :: C
h := relu(c) :: H(n)
";
        let errs = check(src).unwrap_err();
        assert!(errs.iter().any(|e| e.kind == TypeErrorKind::KindMismatch));
    }

    #[test]
    fn use_before_declaration() {
        let errs = check("h := relu(g) :: H(n)\nInput g :: G(n)\n").unwrap_err();
        assert!(errs.iter().any(|e| e.kind == TypeErrorKind::UseBeforeDeclaration));
    }

    #[test]
    fn alpha_equivalence_of_typecheck() {
        let a = "\
Input g :: G(n)
h := relu(g) :: H(n)
";
        let b = "\
Input zebra :: G(width)
quux := relu(zebra) :: H(width)
";
        let ta = check(a).unwrap();
        let tb = check(b).unwrap();
        assert_eq!(ta.dialect, tb.dialect);
        assert!(super::super::ast::alpha_equivalent(&ta.program, &tb.program));
    }
}
