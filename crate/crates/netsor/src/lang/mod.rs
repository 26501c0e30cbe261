//! The tensor-program language: AST, textual syntax, type checking, and the
//! semantics-preserving dialect transforms.

mod ast;
mod fuzz;
mod parser;
mod printer;
mod transform;
mod typecheck;

pub use ast::{alpha_equivalent, Dialect, Expr, Output, Program, Statement, TypeKind, VarType};
pub use fuzz::{random_program, random_sampling, FuzzOptions};
pub use parser::{parse_program, parse_program_with, ParseError};
pub use printer::print_program;
pub use transform::{absorb_lincomb, unwind, TransformError};
pub use typecheck::{typecheck, TypeError, TypeErrorKind, TypedProgram};
