//! Arithmetic over run fields.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | atom
//! atom  := number | field '[' index ']' | ('min' | 'max') '(' expr ',' expr ')' | '(' expr ')'
//! field := 'u' | 'q' | 'tau' | 'r'
//! ```
//! `u`, `q`, `tau` are indexed by task position, `r` by resource coordinate.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ExprError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("{field}[{index}] is out of range")]
    Index { field: Field, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    U,
    Q,
    Tau,
    R,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Field::U => "u",
            Field::Q => "q",
            Field::Tau => "tau",
            Field::R => "r",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Ref(Field, usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
}

/// One joint run as seen by an expression.
pub struct RunView<'a> {
    pub u: &'a [f64],
    pub q: &'a [bool],
    pub tau: &'a [f64],
    pub r: &'a [f64],
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr, ExprError> {
        let mut p = Parser { src: src.as_bytes(), pos: 0 };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("trailing input"));
        }
        Ok(e)
    }

    pub fn eval(&self, run: &RunView<'_>) -> Result<f64, ExprError> {
        Ok(match self {
            Expr::Const(c) => *c,
            Expr::Ref(field, i) => {
                let i = *i;
                let oob = || ExprError::Index { field: *field, index: i };
                match field {
                    Field::U => *run.u.get(i).ok_or_else(oob)?,
                    Field::Q => f64::from(u8::from(*run.q.get(i).ok_or_else(oob)?)),
                    Field::Tau => *run.tau.get(i).ok_or_else(oob)?,
                    Field::R => *run.r.get(i).ok_or_else(oob)?,
                }
            }
            Expr::Neg(a) => -a.eval(run)?,
            Expr::Add(a, b) => a.eval(run)? + b.eval(run)?,
            Expr::Sub(a, b) => a.eval(run)? - b.eval(run)?,
            Expr::Mul(a, b) => a.eval(run)? * b.eval(run)?,
            Expr::Div(a, b) => a.eval(run)? / b.eval(run)?,
            Expr::Min(a, b) => a.eval(run)?.min(b.eval(run)?),
            Expr::Max(a, b) => a.eval(run)?.max(b.eval(run)?),
        })
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> ExprError {
        ExprError::Parse { pos: self.pos, msg: msg.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expect(&mut self, c: u8) -> Result<(), ExprError> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(b'+') => {
                    self.pos += 1;
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Some(b'-') => {
                    self.pos += 1;
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
                }
                Some(b'/') => {
                    self.pos += 1;
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
                    self.pos += 1;
                }
                let word = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or_default().to_string();
                match word.as_str() {
                    "min" | "max" => {
                        self.expect(b'(')?;
                        let a = self.expr()?;
                        self.expect(b',')?;
                        let b = self.expr()?;
                        self.expect(b')')?;
                        Ok(if word == "min" { Expr::Min(Box::new(a), Box::new(b)) } else { Expr::Max(Box::new(a), Box::new(b)) })
                    }
                    "u" | "q" | "tau" | "r" => {
                        let field = match word.as_str() {
                            "u" => Field::U,
                            "q" => Field::Q,
                            "tau" => Field::Tau,
                            _ => Field::R,
                        };
                        self.expect(b'[')?;
                        self.skip_ws();
                        let start = self.pos;
                        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                            self.pos += 1;
                        }
                        let idx = std::str::from_utf8(&self.src[start..self.pos])
                            .ok()
                            .and_then(|s| s.parse::<usize>().ok())
                            .ok_or_else(|| self.err("expected an index"))?;
                        self.expect(b']')?;
                        Ok(Expr::Ref(field, idx))
                    }
                    _ => {
                        self.pos = start;
                        Err(self.err(&format!("unknown name `{word}`")))
                    }
                }
            }
            _ => Err(self.err("expected a value")),
        }
    }

    fn number(&mut self) -> Result<Expr, ExprError> {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < self.src.len() && (self.src[self.pos] == b'e' || self.src[self.pos] == b'E') {
            self.pos += 1;
            if self.pos < self.src.len() && (self.src[self.pos] == b'-' || self.src[self.pos] == b'+') {
                self.pos += 1;
            }
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .ok()
            .and_then(|s| s.parse::<f64>().ok())
            .map(Expr::Const)
            .ok_or_else(|| ExprError::Parse { pos: start, msg: "bad number".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run() -> (Vec<f64>, Vec<bool>, Vec<f64>, Vec<f64>) {
        (vec![0.2, 0.9], vec![false, true], vec![0.5, 0.5], vec![3.0])
    }

    fn eval(src: &str) -> f64 {
        let (u, q, tau, r) = run();
        Expr::parse(src).unwrap().eval(&RunView { u: &u, q: &q, tau: &tau, r: &r }).unwrap()
    }

    #[test]
    fn precedence_and_functions() {
        assert_eq!(eval("1 + 2 * 3"), 7.0);
        assert_eq!(eval("(1 + 2) * 3"), 9.0);
        assert_eq!(eval("-2 - -3"), 1.0);
        assert_eq!(eval("8 / 4 / 2"), 1.0);
        assert_eq!(eval("min(u[0], u[1]) + max(q[0], q[1])"), 1.2);
        assert_eq!(eval("u[1] - tau[1]"), 0.9 - 0.5);
        assert_eq!(eval("r[0] * 1e-1"), 3.0 * 0.1);
        assert_eq!(eval("0"), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(Expr::parse("1 +"), Err(ExprError::Parse { .. })));
        assert!(matches!(Expr::parse("foo[0]"), Err(ExprError::Parse { .. })));
        assert!(matches!(Expr::parse("u[0] )"), Err(ExprError::Parse { .. })));
        let (u, q, tau, r) = run();
        let e = Expr::parse("u[5]").unwrap();
        assert_eq!(
            e.eval(&RunView { u: &u, q: &q, tau: &tau, r: &r }).unwrap_err(),
            ExprError::Index { field: Field::U, index: 5 }
        );
    }
}
