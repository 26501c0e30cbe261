//! Canonical textual form; `parse(print(p))` reproduces the AST for any
//! program whose nonlinearity names resolve in the parsing registry.

use super::ast::{Expr, Program, TypeKind, VarType};
use std::fmt::Write;

fn write_type(out: &mut String, ty: &VarType) {
    match ty.kind {
        TypeKind::G => {
            let _ = write!(out, "G({})", ty.dims[0]);
        }
        TypeKind::H => {
            let _ = write!(out, "H({})", ty.dims[0]);
        }
        TypeKind::A => {
            let _ = write!(out, "A({}, {})", ty.dims[0], ty.dims[1]);
        }
        TypeKind::C => out.push('C'),
    }
}

pub fn print_program(p: &Program) -> String {
    let mut out = String::new();
    for s in &p.statements {
        match &s.expr {
            Expr::Input => {
                let _ = write!(out, "Input {} :: ", s.target);
            }
            Expr::MatMul { avar, hvar } => {
                let _ = write!(out, "{} := MatMul({}, {}) :: ", s.target, avar, hvar);
            }
            Expr::LinComb { terms } => {
                let _ = write!(out, "{} := ", s.target);
                for (i, (c, v)) in terms.iter().enumerate() {
                    let mag = c.abs();
                    if i == 0 {
                        if *c < 0.0 {
                            out.push_str("- ");
                        }
                    } else if *c < 0.0 {
                        out.push_str(" - ");
                    } else {
                        out.push_str(" + ");
                    }
                    if mag == 1.0 {
                        out.push_str(v);
                    } else {
                        let _ = write!(out, "{mag} * {v}");
                    }
                }
                out.push_str(" :: ");
            }
            Expr::Nonlin { name, gvars, cvars } => {
                let _ = write!(out, "{} := {}({}", s.target, name, gvars.join(", "));
                if !cvars.is_empty() {
                    let _ = write!(out, "; {}", cvars.join(", "));
                }
                out.push_str(") :: ");
            }
            Expr::Moment { name, gvars, cvars } => {
                let _ = write!(out, "{} := Moment({}; {}", s.target, name, gvars.join(", "));
                if !cvars.is_empty() {
                    let _ = write!(out, "; {}", cvars.join(", "));
                }
                out.push_str(") :: ");
            }
        }
        write_type(&mut out, &s.ty);
        out.push('\n');
    }
    for o in &p.outputs {
        let _ = writeln!(out, "Output {} * {}", o.readout, o.hvar);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::parser::parse_program;
    use super::*;

    #[test]
    fn round_trip_structural_equality() {
        let src = "\
Input W1x :: G(n)
Input b1 :: G(n)
Input W2 :: A(n, n)
Input v :: G(n)
h1 := W1x + 2.5 * b1 - W1x :: G(n)
x1 := relu(h1) :: H(n)
ht2 := MatMul(W2, x1) :: G(n)
nu := Moment(id; ht2) :: C
y := ln_relu(ht2; nu, nu) :: H(n)
Output v * y
";
        let p = parse_program(src).unwrap();
        let printed = print_program(&p);
        let p2 = parse_program(&printed).unwrap();
        assert_eq!(p, p2, "printed form:\n{printed}");
    }
}
