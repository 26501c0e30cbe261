//! Line-oriented parser for the textual program format.
//!
//! One statement per line, `//` comments, blank lines ignored:
//!
//! ```text
//! Input W1x :: G(n)
//! Input W2 :: A(n, n)
//! h1 := W1x + b1 :: G(n)
//! ht2 := MatMul(W2, x1) :: G(n)
//! x1 := relu(h1) :: H(n)
//! nu := Moment(id; h1) :: C
//! y := ln_relu(h1; nu, varr) :: H(n)
//! Output v * x1
//! ```

use super::ast::{Expr, Output, Program, Statement, TypeKind, VarType};
use crate::nonlin::NonlinRegistry;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "parse error at line {}, col {}: {}", self.line, self.col, self.message)
    }
}

impl std::error::Error for ParseError {}

/// Parse against the builtin nonlinearity registry.
pub fn parse_program(text: &str) -> Result<Program, ParseError> {
    parse_program_with(text, &NonlinRegistry::builtin())
}

/// Parse against a caller-supplied registry (the plugin point for
/// user-defined scalar functions).
pub fn parse_program_with(text: &str, registry: &NonlinRegistry) -> Result<Program, ParseError> {
    let mut program = Program::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = match raw.find("//") {
            Some(p) => &raw[..p],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut cur = Cursor { s: line, pos: 0, line: lineno };
        if cur.try_keyword("Input") {
            let name = cur.ident()?;
            cur.expect("::")?;
            let ty = parse_type(&mut cur)?;
            cur.end()?;
            if ty.kind == TypeKind::H {
                return Err(cur.err("inputs must be G, A, or C vars (H cannot be declared as input)"));
            }
            program.statements.push(Statement { target: name, expr: Expr::Input, ty });
        } else if cur.try_keyword("Output") {
            let readout = cur.ident()?;
            cur.expect("*")?;
            let hvar = cur.ident()?;
            cur.end()?;
            program.outputs.push(Output { readout, hvar });
        } else {
            let target = cur.ident()?;
            cur.expect(":=")?;
            let expr = parse_expr(&mut cur, registry, &mut program)?;
            cur.expect("::")?;
            let ty = parse_type(&mut cur)?;
            cur.end()?;
            program.statements.push(Statement { target, expr, ty });
        }
    }
    Ok(program)
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
    line: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.line, col: self.pos + 1, message: msg.into() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s.as_bytes()[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn try_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let r = self.rest();
        if r.starts_with(kw) {
            let after = &r[kw.len()..];
            if after.is_empty() || !after.as_bytes()[0].is_ascii_alphanumeric() {
                self.pos += kw.len();
                return true;
            }
        }
        false
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.rest().chars().next()
    }

    fn expect(&mut self, tok: &str) -> Result<(), ParseError> {
        self.skip_ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            Ok(())
        } else {
            Err(self.err(format!("expected `{tok}`")))
        }
    }

    fn ident(&mut self) -> Result<String, ParseError> {
        self.skip_ws();
        let r = self.rest();
        let mut len = 0;
        for (i, c) in r.char_indices() {
            let ok = if i == 0 { c.is_ascii_alphabetic() || c == '_' } else { c.is_ascii_alphanumeric() || c == '_' };
            if !ok {
                break;
            }
            len = i + c.len_utf8();
        }
        if len == 0 {
            return Err(self.err("expected identifier"));
        }
        let id = &r[..len];
        self.pos += len;
        Ok(id.to_string())
    }

    fn number(&mut self) -> Result<f64, ParseError> {
        self.skip_ws();
        let r = self.rest();
        let bytes = r.as_bytes();
        let mut len = 0;
        if len < bytes.len() && (bytes[len] == b'-' || bytes[len] == b'+') {
            len += 1;
        }
        while len < bytes.len() && (bytes[len].is_ascii_digit() || bytes[len] == b'.') {
            len += 1;
        }
        if len < bytes.len() && (bytes[len] == b'e' || bytes[len] == b'E') {
            len += 1;
            if len < bytes.len() && (bytes[len] == b'-' || bytes[len] == b'+') {
                len += 1;
            }
            while len < bytes.len() && bytes[len].is_ascii_digit() {
                len += 1;
            }
        }
        r[..len]
            .parse::<f64>()
            .map_err(|_| self.err("expected number"))
            .inspect(|_| self.pos += len)
    }

    fn end(&mut self) -> Result<(), ParseError> {
        self.skip_ws();
        if self.rest().is_empty() {
            Ok(())
        } else {
            Err(self.err(format!("unexpected trailing input `{}`", self.rest())))
        }
    }
}

fn parse_type(cur: &mut Cursor) -> Result<VarType, ParseError> {
    let kind = match cur.peek() {
        Some('G') => TypeKind::G,
        Some('H') => TypeKind::H,
        Some('A') => TypeKind::A,
        Some('C') => TypeKind::C,
        _ => return Err(cur.err("malformed type annotation: expected G, H, A, or C")),
    };
    cur.pos += 1;
    if kind == TypeKind::C {
        return Ok(VarType::c());
    }
    cur.expect("(")?;
    let d1 = cur.ident()?;
    let mut dims = vec![d1];
    if kind == TypeKind::A {
        cur.expect(",")?;
        dims.push(cur.ident()?);
    }
    cur.expect(")")?;
    Ok(VarType { kind, dims })
}

fn ident_list(cur: &mut Cursor) -> Result<Vec<String>, ParseError> {
    let mut out = Vec::new();
    if matches!(cur.peek(), Some(')') | Some(';')) {
        return Ok(out);
    }
    loop {
        out.push(cur.ident()?);
        if cur.peek() == Some(',') {
            cur.expect(",")?;
        } else {
            break;
        }
    }
    Ok(out)
}

fn parse_expr(
    cur: &mut Cursor,
    registry: &NonlinRegistry,
    program: &mut Program,
) -> Result<Expr, ParseError> {
    cur.skip_ws();
    if cur.try_keyword("MatMul") {
        cur.expect("(")?;
        let avar = cur.ident()?;
        cur.expect(",")?;
        let hvar = cur.ident()?;
        cur.expect(")")?;
        return Ok(Expr::MatMul { avar, hvar });
    }
    if cur.try_keyword("Moment") {
        cur.expect("(")?;
        let name = cur.ident()?;
        cur.expect(";")?;
        let gvars = ident_list(cur)?;
        let cvars = if cur.peek() == Some(';') {
            cur.expect(";")?;
            ident_list(cur)?
        } else {
            Vec::new()
        };
        cur.expect(")")?;
        resolve_nonlin(cur, registry, program, &name)?;
        return Ok(Expr::Moment { name, gvars, cvars });
    }
    // Either a nonlinearity application `f(...)` or a linear combination.
    let save = cur.pos;
    if cur.peek().map(|c| c.is_ascii_alphabetic() || c == '_') == Some(true) {
        let name = cur.ident()?;
        if cur.peek() == Some('(') {
            cur.expect("(")?;
            let gvars = ident_list(cur)?;
            let cvars = if cur.peek() == Some(';') {
                cur.expect(";")?;
                ident_list(cur)?
            } else {
                Vec::new()
            };
            cur.expect(")")?;
            resolve_nonlin(cur, registry, program, &name)?;
            return Ok(Expr::Nonlin { name, gvars, cvars });
        }
        cur.pos = save;
    }
    // linear combination: term ((+|-) term)*
    let mut terms = Vec::new();
    let mut sign = 1.0;
    if cur.peek() == Some('-') {
        cur.expect("-")?;
        sign = -1.0;
    }
    loop {
        let term = parse_term(cur)?;
        terms.push((sign * term.0, term.1));
        match cur.peek() {
            Some('+') => {
                cur.expect("+")?;
                sign = 1.0;
            }
            Some('-') => {
                cur.expect("-")?;
                sign = -1.0;
            }
            _ => break,
        }
    }
    Ok(Expr::LinComb { terms })
}

fn parse_term(cur: &mut Cursor) -> Result<(f64, String), ParseError> {
    cur.skip_ws();
    match cur.peek() {
        Some(c) if c.is_ascii_digit() || c == '.' => {
            let coeff = cur.number()?;
            cur.expect("*")?;
            let var = cur.ident()?;
            Ok((coeff, var))
        }
        Some(c) if c.is_ascii_alphabetic() || c == '_' => Ok((1.0, cur.ident()?)),
        _ => Err(cur.err("expected linear-combination term")),
    }
}

fn resolve_nonlin(
    cur: &Cursor,
    registry: &NonlinRegistry,
    program: &mut Program,
    name: &str,
) -> Result<(), ParseError> {
    if program.nonlins.contains_key(name) {
        return Ok(());
    }
    match registry.get(name) {
        Some(spec) => {
            program.nonlins.insert(name.to_string(), spec.clone());
            Ok(())
        }
        None => Err(cur.err(format!("unknown nonlinearity name `{name}`"))),
    }
}
