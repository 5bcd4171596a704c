//! Expression DSL: scalar expressions over variables x1..xn with exact
//! rational exponents.
//!
//! The surface syntax is `expr := ['-'] term (('+'|'-') term)*`,
//! `term := factor (('*'|'/') factor)*`, `factor := atom ['^' rational]`,
//! `atom := number | ident | func '(' expr ')' | '(' expr ')'`.
//! After `^` the parser greedily absorbs `p/q` as one rational exponent,
//! so `x1^2/3` means x1^(2/3); the printer re-parenthesizes to keep
//! round trips exact.

use std::cmp::Ordering;
use std::fmt;
use thiserror::Error;

mod parse;
mod simplify;

pub use parse::{parse, parse_with_symbols, ParseError};
pub use simplify::simplify;

/// Reduced fraction, denominator always positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rational {
    num: i64,
    den: i64,
}

fn gcd(a: i64, b: i64) -> i64 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

impl Rational {
    /// Panics if `den == 0`.
    pub fn new(num: i64, den: i64) -> Self {
        assert!(den != 0, "rational with zero denominator");
        if num == 0 {
            return Rational { num: 0, den: 1 };
        }
        let g = gcd(num, den);
        let sign = if den < 0 { -1 } else { 1 };
        Rational {
            num: sign * num / g,
            den: (den / g).abs(),
        }
    }

    pub const fn int(n: i64) -> Self {
        Rational { num: n, den: 1 }
    }

    pub fn num(&self) -> i64 {
        self.num
    }

    pub fn den(&self) -> i64 {
        self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_integer(&self) -> bool {
        self.den == 1
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn is_one(&self) -> bool {
        self.num == 1 && self.den == 1
    }

    pub fn add(self, o: Rational) -> Rational {
        let num = (self.num as i128) * (o.den as i128) + (o.num as i128) * (self.den as i128);
        let den = (self.den as i128) * (o.den as i128);
        let g = gcd128(num, den);
        Rational::new(
            i64::try_from(num / g).expect("rational overflow"),
            i64::try_from(den / g).expect("rational overflow"),
        )
    }

    pub fn mul(self, o: Rational) -> Rational {
        let num = (self.num as i128) * (o.num as i128);
        let den = (self.den as i128) * (o.den as i128);
        let g = gcd128(num, den);
        Rational::new(
            i64::try_from(num / g).expect("rational overflow"),
            i64::try_from(den / g).expect("rational overflow"),
        )
    }

    pub fn neg(self) -> Rational {
        Rational {
            num: -self.num,
            den: self.den,
        }
    }
}

fn gcd128(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    if a == 0 {
        1
    } else {
        a
    }
}

impl fmt::Display for Rational {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// Expression tree. `Var(i)` is the 1-based variable x_i. `Sum` and `Prod`
/// are n-ary with at least two children in parser output; `Pow` carries an
/// exact rational exponent.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Rational),
    Neg(Box<Expr>),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Log(Box<Expr>),
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("variable x{index} out of range for dimension {dim}")]
    VarOutOfRange { index: usize, dim: usize },
    #[error("log of non-positive value {arg}")]
    LogDomain { arg: f64 },
    #[error("fractional power of negative base {base}")]
    PowDomain { base: f64 },
    #[error("division by zero")]
    DivByZero,
    #[error("non-finite value in {node}")]
    NonFinite { node: &'static str },
}

fn finite(v: f64, node: &'static str) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { node })
    }
}

pub(crate) fn pow_value(base: f64, r: Rational) -> Result<f64, EvalError> {
    if r.is_integer() {
        if base == 0.0 && r.num < 0 {
            return Err(EvalError::DivByZero);
        }
        let v = match i32::try_from(r.num) {
            Ok(i) => base.powi(i),
            Err(_) => base.powf(r.num as f64),
        };
        finite(v, "pow")
    } else {
        if base < 0.0 {
            return Err(EvalError::PowDomain { base });
        }
        if base == 0.0 && r.num < 0 {
            return Err(EvalError::DivByZero);
        }
        finite(base.powf(r.as_f64()), "pow")
    }
}

impl Expr {
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => {
                if *i == 0 || *i > x.len() {
                    Err(EvalError::VarOutOfRange {
                        index: *i,
                        dim: x.len(),
                    })
                } else {
                    Ok(x[*i - 1])
                }
            }
            Expr::Sum(cs) => {
                let mut acc = 0.0;
                for c in cs {
                    acc += c.eval(x)?;
                }
                finite(acc, "sum")
            }
            Expr::Prod(cs) => {
                let mut acc = 1.0;
                for c in cs {
                    acc *= c.eval(x)?;
                }
                finite(acc, "product")
            }
            Expr::Div(u, v) => {
                let a = u.eval(x)?;
                let b = v.eval(x)?;
                if b == 0.0 {
                    return Err(EvalError::DivByZero);
                }
                finite(a / b, "quotient")
            }
            Expr::Pow(u, r) => pow_value(u.eval(x)?, *r),
            Expr::Neg(u) => Ok(-u.eval(x)?),
            Expr::Sin(u) => finite(u.eval(x)?.sin(), "sin"),
            Expr::Cos(u) => finite(u.eval(x)?.cos(), "cos"),
            Expr::Exp(u) => finite(u.eval(x)?.exp(), "exp"),
            Expr::Log(u) => {
                let a = u.eval(x)?;
                if a <= 0.0 {
                    return Err(EvalError::LogDomain { arg: a });
                }
                finite(a.ln(), "log")
            }
        }
    }

    /// Partial derivative with respect to x_var (1-based), simplified.
    pub fn diff(&self, var: usize) -> Expr {
        simplify(&self.diff_raw(var))
    }

    fn diff_raw(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Sum(cs) => Expr::Sum(cs.iter().map(|c| c.diff_raw(var)).collect()),
            Expr::Prod(cs) => {
                let mut terms = Vec::with_capacity(cs.len());
                for i in 0..cs.len() {
                    let mut fs = cs.clone();
                    fs[i] = cs[i].diff_raw(var);
                    terms.push(Expr::Prod(fs));
                }
                Expr::Sum(terms)
            }
            Expr::Div(u, v) => Expr::Div(
                Box::new(Expr::Sum(vec![
                    Expr::Prod(vec![u.diff_raw(var), (**v).clone()]),
                    Expr::Neg(Box::new(Expr::Prod(vec![(**u).clone(), v.diff_raw(var)]))),
                ])),
                Box::new(Expr::Pow((*v).clone(), Rational::int(2))),
            ),
            Expr::Pow(u, r) => Expr::Prod(vec![
                Expr::Const(r.as_f64()),
                Expr::Pow((*u).clone(), r.add(Rational::int(-1))),
                u.diff_raw(var),
            ]),
            Expr::Neg(u) => Expr::Neg(Box::new(u.diff_raw(var))),
            Expr::Sin(u) => Expr::Prod(vec![Expr::Cos((*u).clone()), u.diff_raw(var)]),
            Expr::Cos(u) => Expr::Neg(Box::new(Expr::Prod(vec![
                Expr::Sin((*u).clone()),
                u.diff_raw(var),
            ]))),
            Expr::Exp(u) => Expr::Prod(vec![Expr::Exp((*u).clone()), u.diff_raw(var)]),
            Expr::Log(u) => Expr::Div(Box::new(u.diff_raw(var)), (*u).clone()),
        }
    }

    /// Largest variable index mentioned, 0 if none.
    pub fn max_var(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => *i,
            Expr::Sum(cs) | Expr::Prod(cs) => cs.iter().map(|c| c.max_var()).max().unwrap_or(0),
            Expr::Div(u, v) => u.max_var().max(v.max_var()),
            Expr::Pow(u, _)
            | Expr::Neg(u)
            | Expr::Sin(u)
            | Expr::Cos(u)
            | Expr::Exp(u)
            | Expr::Log(u) => u.max_var(),
        }
    }

    pub fn is_zero_const(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }
}

fn rank(e: &Expr) -> u8 {
    match e {
        Expr::Const(_) => 0,
        Expr::Var(_) => 1,
        Expr::Sum(_) => 2,
        Expr::Prod(_) => 3,
        Expr::Div(..) => 4,
        Expr::Pow(..) => 5,
        Expr::Neg(_) => 6,
        Expr::Sin(_) => 7,
        Expr::Cos(_) => 8,
        Expr::Exp(_) => 9,
        Expr::Log(_) => 10,
    }
}

/// Total order on expressions: discriminant rank, then structural.
pub fn cmp_expr(a: &Expr, b: &Expr) -> Ordering {
    let r = rank(a).cmp(&rank(b));
    if r != Ordering::Equal {
        return r;
    }
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => x.total_cmp(y),
        (Expr::Var(i), Expr::Var(j)) => i.cmp(j),
        (Expr::Sum(xs), Expr::Sum(ys)) | (Expr::Prod(xs), Expr::Prod(ys)) => {
            let l = xs.len().cmp(&ys.len());
            if l != Ordering::Equal {
                return l;
            }
            for (x, y) in xs.iter().zip(ys) {
                let c = cmp_expr(x, y);
                if c != Ordering::Equal {
                    return c;
                }
            }
            Ordering::Equal
        }
        (Expr::Div(u1, v1), Expr::Div(u2, v2)) => {
            let c = cmp_expr(u1, u2);
            if c != Ordering::Equal {
                return c;
            }
            cmp_expr(v1, v2)
        }
        (Expr::Pow(u1, r1), Expr::Pow(u2, r2)) => {
            let c = cmp_expr(u1, u2);
            if c != Ordering::Equal {
                return c;
            }
            (r1.num, r1.den).cmp(&(r2.num, r2.den))
        }
        (Expr::Neg(u), Expr::Neg(v))
        | (Expr::Sin(u), Expr::Sin(v))
        | (Expr::Cos(u), Expr::Cos(v))
        | (Expr::Exp(u), Expr::Exp(v))
        | (Expr::Log(u), Expr::Log(v)) => cmp_expr(u, v),
        _ => unreachable!("rank matched but variants differ"),
    }
}

/// Ord wrapper so expressions can key BTreeMaps.
#[derive(Debug, Clone)]
pub(crate) struct OrdExpr(pub Expr);

impl PartialEq for OrdExpr {
    fn eq(&self, other: &Self) -> bool {
        cmp_expr(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for OrdExpr {}
impl PartialOrd for OrdExpr {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdExpr {
    fn cmp(&self, other: &Self) -> Ordering {
        cmp_expr(&self.0, &other.0)
    }
}

// Printing. Precedence classes: 0 sums and anything rendering with a leading
// minus, 1 products and quotients, 2 powers, 3 atoms. A child is
// parenthesized when its class is below what the position requires. Two
// extra guards keep reparses exact: any factor rendering with a leading '-'
// is parenthesized, and a quotient numerator ending in `^k` is parenthesized
// when the denominator starts with a digit (otherwise the rational-exponent
// absorption would steal the denominator).

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Sum(_) | Expr::Neg(_) => 0,
        Expr::Const(c) if *c < 0.0 => 0,
        Expr::Prod(_) | Expr::Div(..) => 1,
        Expr::Pow(..) => 2,
        _ => 3,
    }
}

fn render(e: &Expr, req: u8, out: &mut String) {
    if prec(e) < req {
        out.push('(');
        render_naked(e, out);
        out.push(')');
    } else {
        render_naked(e, out);
    }
}

fn ends_with_caret_int(s: &str) -> bool {
    let t = s.trim_end_matches(|c: char| c.is_ascii_digit());
    if t.len() == s.len() {
        return false;
    }
    let t = t.strip_suffix('-').unwrap_or(t);
    t.ends_with('^')
}

fn render_naked(e: &Expr, out: &mut String) {
    match e {
        Expr::Const(c) => {
            out.push_str(&format!("{}", c));
        }
        Expr::Var(i) => {
            out.push('x');
            out.push_str(&i.to_string());
        }
        Expr::Sum(cs) => {
            for (k, c) in cs.iter().enumerate() {
                if k == 0 {
                    render(c, 0, out);
                    continue;
                }
                match c {
                    Expr::Neg(u) => {
                        out.push_str(" - ");
                        render(u, 1, out);
                    }
                    Expr::Const(v) if *v < 0.0 => {
                        out.push_str(" - ");
                        render(&Expr::Const(-*v), 1, out);
                    }
                    Expr::Prod(fs)
                        if matches!(fs.first(), Some(Expr::Const(v)) if *v < 0.0) =>
                    {
                        let mut flipped = fs.clone();
                        if let Expr::Const(v) = &mut flipped[0] {
                            *v = -*v;
                        }
                        out.push_str(" - ");
                        render(&Expr::Prod(flipped), 1, out);
                    }
                    _ => {
                        out.push_str(" + ");
                        render(c, 1, out);
                    }
                }
            }
        }
        Expr::Prod(cs) => {
            for (k, c) in cs.iter().enumerate() {
                if k > 0 {
                    out.push('*');
                }
                render(c, 2, out);
            }
        }
        Expr::Div(u, v) => {
            let mut num = String::new();
            render(u, 1, &mut num);
            let mut den = String::new();
            render(v, 2, &mut den);
            if ends_with_caret_int(&num) && den.starts_with(|c: char| c.is_ascii_digit()) {
                out.push('(');
                out.push_str(&num);
                out.push(')');
            } else {
                out.push_str(&num);
            }
            out.push('/');
            out.push_str(&den);
        }
        Expr::Pow(u, r) => {
            render(u, 3, out);
            out.push('^');
            out.push_str(&r.to_string());
        }
        Expr::Neg(u) => {
            out.push('-');
            render(u, 1, out);
        }
        Expr::Sin(u) => {
            out.push_str("sin(");
            render(u, 0, out);
            out.push(')');
        }
        Expr::Cos(u) => {
            out.push_str("cos(");
            render(u, 0, out);
            out.push(')');
        }
        Expr::Exp(u) => {
            out.push_str("exp(");
            render(u, 0, out);
            out.push(')');
        }
        Expr::Log(u) => {
            out.push_str("log(");
            render(u, 0, out);
            out.push(')');
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        render_naked(self, &mut s);
        f.write_str(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        parse(s).unwrap()
    }

    #[test]
    fn eval_basics() {
        let e = p("x1^2 + 3*x2 - 1/2");
        assert_eq!(e.eval(&[2.0, 1.0]).unwrap(), 6.5);
        let e = p("sin(x1)*cos(x1)");
        let v = e.eval(&[0.3]).unwrap();
        assert!((v - 0.3f64.sin() * 0.3f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn eval_domain_errors() {
        assert_eq!(p("1/x1").eval(&[0.0]).unwrap_err(), EvalError::DivByZero);
        assert!(matches!(
            p("log(x1)").eval(&[-1.0]).unwrap_err(),
            EvalError::LogDomain { .. }
        ));
        assert!(matches!(
            p("x1^1/2").eval(&[-4.0]).unwrap_err(),
            EvalError::PowDomain { .. }
        ));
        assert!(matches!(
            p("exp(x1)").eval(&[1e4]).unwrap_err(),
            EvalError::NonFinite { .. }
        ));
    }

    #[test]
    fn diff_chain_rule() {
        let e = p("sin(x1^2)");
        let d = e.diff(1);
        for &t in &[0.0f64, 0.7, -1.3, 2.0] {
            let want = 2.0 * t * (t * t).cos();
            assert!((d.eval(&[t]).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn diff_quotient_and_log() {
        let e = p("log(x1)/x1");
        let d = e.diff(1);
        for &t in &[0.5f64, 1.0, 3.0] {
            let want = (1.0 - t.ln()) / (t * t);
            assert!((d.eval(&[t]).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn display_reparses_exactly() {
        for s in [
            "x1 + x2*x3",
            "(x1 + x2)*x3",
            "x1^2/3",
            "(x1^2)/3",
            "x1*(x2/x3)",
            "x1*x2/x3",
            "-x1 + 2",
            "sin(x1)^2 + cos(x1)^2",
            "x1^-2/3",
            "2^3",
            "sqrt(x1 + 1)",
        ] {
            let e = p(s);
            let printed = e.to_string();
            let back = parse(&printed).unwrap();
            assert_eq!(e, back, "{s} -> {printed}");
        }
    }

    #[test]
    fn caret_guard() {
        let e = Expr::Div(
            Box::new(Expr::Pow(Box::new(Expr::Var(1)), Rational::int(2))),
            Box::new(Expr::Const(3.0)),
        );
        let s = e.to_string();
        assert_eq!(s, "(x1^2)/3");
        assert_eq!(parse(&s).unwrap(), e);
    }

    #[test]
    fn rational_reduction() {
        assert_eq!(Rational::new(2, 4), Rational::new(1, 2));
        assert_eq!(Rational::new(3, -6), Rational::new(-1, 2));
        assert_eq!(Rational::new(-2, -4).to_string(), "1/2");
        assert_eq!(Rational::new(1, 2).add(Rational::new(1, 2)), Rational::int(1));
        assert_eq!(Rational::new(2, 3).mul(Rational::new(3, 2)), Rational::int(1));
    }

    #[test]
    fn cmp_total_order() {
        let a = p("x1");
        let b = p("x2");
        let c = p("x1*x2");
        assert_eq!(cmp_expr(&a, &a), Ordering::Equal);
        assert_eq!(cmp_expr(&a, &b), Ordering::Less);
        assert_eq!(cmp_expr(&b, &c), Ordering::Less);
    }
}
