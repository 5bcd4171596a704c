//! Lexer and recursive-descent parser for the expression DSL.

use super::{Expr, Rational};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
#[error("parse error at line {line}, col {col}: {message}")]
pub struct ParseError {
    pub line: u32,
    pub col: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num { value: f64, int: bool },
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
}

fn lex(src: &str) -> Result<(Vec<Spanned>, (u32, u32)), ParseError> {
    let mut toks = Vec::new();
    let mut line = 1u32;
    let mut col = 1u32;
    let mut chars = src.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (tl, tc) = (line, col);
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        if c.is_whitespace() {
            bump(&mut chars);
            continue;
        }
        let tok = match c {
            '+' => {
                bump(&mut chars);
                Tok::Plus
            }
            '-' => {
                bump(&mut chars);
                Tok::Minus
            }
            '*' => {
                bump(&mut chars);
                Tok::Star
            }
            '/' => {
                bump(&mut chars);
                Tok::Slash
            }
            '^' => {
                bump(&mut chars);
                Tok::Caret
            }
            '(' => {
                bump(&mut chars);
                Tok::LParen
            }
            ')' => {
                bump(&mut chars);
                Tok::RParen
            }
            d if d.is_ascii_digit() => {
                let mut text = String::new();
                let mut int = true;
                while matches!(chars.peek(), Some(c) if c.is_ascii_digit()) {
                    text.push(bump(&mut chars));
                }
                if matches!(chars.peek(), Some(&'.')) {
                    int = false;
                    text.push(bump(&mut chars));
                    while matches!(chars.peek(), Some(c) if c.is_ascii_digit()) {
                        text.push(bump(&mut chars));
                    }
                }
                if matches!(chars.peek(), Some(&'e') | Some(&'E')) {
                    int = false;
                    text.push(bump(&mut chars));
                    if matches!(chars.peek(), Some(&'+') | Some(&'-')) {
                        text.push(bump(&mut chars));
                    }
                    if !matches!(chars.peek(), Some(c) if c.is_ascii_digit()) {
                        return Err(ParseError {
                            line: tl,
                            col: tc,
                            message: format!("malformed number '{text}'"),
                        });
                    }
                    while matches!(chars.peek(), Some(c) if c.is_ascii_digit()) {
                        text.push(bump(&mut chars));
                    }
                }
                let value: f64 = text.parse().map_err(|_| ParseError {
                    line: tl,
                    col: tc,
                    message: format!("malformed number '{text}'"),
                })?;
                Tok::Num { value, int }
            }
            a if a.is_ascii_alphabetic() || a == '_' => {
                let mut name = String::new();
                while matches!(chars.peek(), Some(c) if c.is_ascii_alphanumeric() || *c == '_') {
                    name.push(bump(&mut chars));
                }
                Tok::Ident(name)
            }
            other => {
                return Err(ParseError {
                    line: tl,
                    col: tc,
                    message: format!("unexpected character '{other}'"),
                });
            }
        };
        toks.push(Spanned {
            tok,
            line: tl,
            col: tc,
        });
    }
    Ok((toks, (line, col)))
}

#[derive(Clone, Copy)]
enum VarMode<'a> {
    AutoX,
    Symbols(&'a [&'a str]),
}

struct Parser<'a> {
    toks: Vec<Spanned>,
    pos: usize,
    end: (u32, u32),
    mode: VarMode<'a>,
}

const FUNCS: [&str; 5] = ["sin", "cos", "exp", "log", "sqrt"];

impl<'a> Parser<'a> {
    fn peek(&self, k: usize) -> Option<&Tok> {
        self.toks.get(self.pos + k).map(|s| &s.tok)
    }

    fn here(&self) -> (u32, u32) {
        self.toks
            .get(self.pos)
            .map(|s| (s.line, s.col))
            .unwrap_or(self.end)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        let (line, col) = self.here();
        ParseError {
            line,
            col,
            message: message.into(),
        }
    }

    fn eat(&mut self, t: &Tok) -> bool {
        if self.peek(0) == Some(t) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let negated = self.eat(&Tok::Minus);
        let mut first = self.term()?;
        if negated {
            first = neg_of(first);
        }
        let mut terms = vec![first];
        loop {
            if self.eat(&Tok::Plus) {
                terms.push(self.term()?);
            } else if self.eat(&Tok::Minus) {
                terms.push(neg_of(self.term()?));
            } else {
                break;
            }
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            Expr::Sum(terms)
        })
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut cur = self.factor()?;
        let mut level_prod = false;
        loop {
            if self.eat(&Tok::Star) {
                let f = self.factor()?;
                cur = if level_prod {
                    match cur {
                        Expr::Prod(mut fs) => {
                            fs.push(f);
                            Expr::Prod(fs)
                        }
                        _ => unreachable!(),
                    }
                } else {
                    Expr::Prod(vec![cur, f])
                };
                level_prod = true;
            } else if self.eat(&Tok::Slash) {
                let f = self.factor()?;
                cur = Expr::Div(Box::new(cur), Box::new(f));
                level_prod = false;
            } else {
                break;
            }
        }
        Ok(cur)
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let a = self.atom()?;
        if !self.eat(&Tok::Caret) {
            return Ok(a);
        }
        let sign = if self.eat(&Tok::Minus) { -1i64 } else { 1 };
        let num = self.integer("integer exponent")?;
        let mut den = 1i64;
        // Absorb p/q as one exponent only when an integer literally follows
        // the slash; anything else leaves the slash for the term level.
        if self.peek(0) == Some(&Tok::Slash)
            && matches!(self.peek(1), Some(Tok::Num { int: true, .. }))
        {
            self.pos += 1;
            den = self.integer("exponent denominator")?;
            if den == 0 {
                return Err(self.err("zero denominator in exponent"));
            }
        }
        Ok(Expr::Pow(Box::new(a), Rational::new(sign * num, den)))
    }

    fn integer(&mut self, what: &str) -> Result<i64, ParseError> {
        match self.peek(0) {
            Some(&Tok::Num { value, int: true }) if value.abs() < 9e15 => {
                self.pos += 1;
                Ok(value as i64)
            }
            _ => Err(self.err(format!("expected {what}"))),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.peek(0).cloned() {
            Some(Tok::Num { value, .. }) => {
                self.pos += 1;
                Ok(Expr::Const(value))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(&Tok::RParen) {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if FUNCS.contains(&name.as_str()) {
                    if !self.eat(&Tok::LParen) {
                        return Err(self.err(format!("expected '(' after function '{name}'")));
                    }
                    let arg = self.expr()?;
                    if !self.eat(&Tok::RParen) {
                        return Err(self.err("expected ')'"));
                    }
                    let arg = Box::new(arg);
                    return Ok(match name.as_str() {
                        "sin" => Expr::Sin(arg),
                        "cos" => Expr::Cos(arg),
                        "exp" => Expr::Exp(arg),
                        "log" => Expr::Log(arg),
                        "sqrt" => Expr::Pow(arg, Rational::new(1, 2)),
                        _ => unreachable!(),
                    });
                }
                self.variable(&name)
            }
            _ => Err(self.err("expected a number, variable, function, or '('")),
        }
    }

    fn variable(&mut self, name: &str) -> Result<Expr, ParseError> {
        match self.mode {
            VarMode::AutoX => {
                if let Some(rest) = name.strip_prefix('x') {
                    if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                        let idx: usize = rest.parse().map_err(|_| {
                            self.err(format!("variable index too large in '{name}'"))
                        })?;
                        if idx >= 1 {
                            return Ok(Expr::Var(idx));
                        }
                    }
                }
                Err(self.err(format!(
                    "unknown identifier '{name}' (variables are x1, x2, ...)"
                )))
            }
            VarMode::Symbols(syms) => match syms.iter().position(|s| *s == name) {
                Some(i) => Ok(Expr::Var(i + 1)),
                None => Err(self.err(format!(
                    "unknown identifier '{name}' (expected one of: {})",
                    syms.join(", ")
                ))),
            },
        }
    }
}

/// Negate a parsed term, folding the sign into a leading constant so the
/// printer and parser agree on a canonical shape.
fn neg_of(e: Expr) -> Expr {
    match e {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Prod(mut fs) => {
            if let Some(Expr::Const(c)) = fs.first_mut() {
                *c = -*c;
                Expr::Prod(fs)
            } else {
                Expr::Neg(Box::new(Expr::Prod(fs)))
            }
        }
        Expr::Neg(u) => *u,
        other => Expr::Neg(Box::new(other)),
    }
}

fn parse_impl(src: &str, mode: VarMode) -> Result<Expr, ParseError> {
    let (toks, end) = lex(src)?;
    let mut p = Parser {
        toks,
        pos: 0,
        end,
        mode,
    };
    let e = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(e)
}

/// Parse with variables named x1, x2, ...
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    parse_impl(src, VarMode::AutoX)
}

/// Parse with an explicit symbol table; `symbols[i]` becomes variable i+1.
pub fn parse_with_symbols(src: &str, symbols: &[&str]) -> Result<Expr, ParseError> {
    parse_impl(src, VarMode::Symbols(symbols))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let e = parse("x1 + x2*x3^2").unwrap();
        assert_eq!(
            e,
            Expr::Sum(vec![
                Expr::Var(1),
                Expr::Prod(vec![
                    Expr::Var(2),
                    Expr::Pow(Box::new(Expr::Var(3)), Rational::int(2)),
                ]),
            ])
        );
    }

    #[test]
    fn rational_absorption() {
        assert_eq!(
            parse("x1^2/3").unwrap(),
            Expr::Pow(Box::new(Expr::Var(1)), Rational::new(2, 3))
        );
        assert_eq!(
            parse("x1^2/x2").unwrap(),
            Expr::Div(
                Box::new(Expr::Pow(Box::new(Expr::Var(1)), Rational::int(2))),
                Box::new(Expr::Var(2))
            )
        );
        assert_eq!(
            parse("x1^-1/2").unwrap(),
            Expr::Pow(Box::new(Expr::Var(1)), Rational::new(-1, 2))
        );
    }

    #[test]
    fn unary_minus_folds_constants() {
        assert_eq!(parse("-2").unwrap(), Expr::Const(-2.0));
        assert_eq!(
            parse("-2*x1").unwrap(),
            Expr::Prod(vec![Expr::Const(-2.0), Expr::Var(1)])
        );
        assert_eq!(
            parse("-x1").unwrap(),
            Expr::Neg(Box::new(Expr::Var(1)))
        );
        assert_eq!(
            parse("3 - 2").unwrap(),
            Expr::Sum(vec![Expr::Const(3.0), Expr::Const(-2.0)])
        );
    }

    #[test]
    fn left_associative_division() {
        let e = parse("x1*x2/x3").unwrap();
        assert_eq!(
            e,
            Expr::Div(
                Box::new(Expr::Prod(vec![Expr::Var(1), Expr::Var(2)])),
                Box::new(Expr::Var(3))
            )
        );
    }

    #[test]
    fn symbols_mode() {
        let e = parse_with_symbols("t1 + k*t2", &["t1", "t2", "k"]).unwrap();
        assert_eq!(
            e,
            Expr::Sum(vec![
                Expr::Var(1),
                Expr::Prod(vec![Expr::Var(3), Expr::Var(2)]),
            ])
        );
        assert!(parse_with_symbols("x1", &["t1", "k"]).is_err());
    }

    #[test]
    fn error_positions() {
        let err = parse("x1 + + x2").unwrap_err();
        assert_eq!((err.line, err.col), (1, 6));
        let err = parse("x1 +\n  )").unwrap_err();
        assert_eq!((err.line, err.col), (2, 3));
        let err = parse("sin x1").unwrap_err();
        assert!(err.message.contains("after function"));
        let err = parse("y2 + 1").unwrap_err();
        assert!(err.message.contains("unknown identifier"));
    }

    #[test]
    fn trailing_input_rejected() {
        assert!(parse("x1 x2").is_err());
        assert!(parse("(x1").is_err());
    }

    #[test]
    fn scientific_notation() {
        assert_eq!(parse("1e-3").unwrap(), Expr::Const(1e-3));
        assert_eq!(parse("2.5E2").unwrap(), Expr::Const(250.0));
    }
}
