//! Conservative bottom-up normal form.
//!
//! Sums flatten, fold constants, and merge like terms keyed on a
//! coefficient-free core; products flatten, fold constants, and merge
//! repeated bases by summing exponents. Children are kept in the order of
//! `cmp_expr`, constants first, which is what lets structurally equal terms
//! cancel to an exact zero. No distribution, no trig identities, and powers
//! of powers merge only when the outer exponent is an integer, so the
//! rewrite never shrinks a domain into wrong values.

use std::collections::BTreeMap;

use super::{pow_value, Expr, OrdExpr, Rational};

pub fn simplify(e: &Expr) -> Expr {
    match e {
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Sum(cs) => rebuild_sum(cs.iter().map(simplify).collect()),
        Expr::Prod(cs) => rebuild_prod(cs.iter().map(simplify).collect()),
        Expr::Div(u, v) => {
            let u = simplify(u);
            let v = simplify(v);
            match (&u, &v) {
                (_, Expr::Const(c)) if *c == 1.0 => u,
                (_, Expr::Const(c)) if *c == -1.0 => rebuild_prod(vec![Expr::Const(-1.0), u]),
                (Expr::Const(a), Expr::Const(b)) if *b != 0.0 && (a / b).is_finite() => {
                    Expr::Const(a / b)
                }
                (Expr::Const(a), _) if *a == 0.0 => Expr::Const(0.0),
                _ => Expr::Div(Box::new(u), Box::new(v)),
            }
        }
        Expr::Pow(u, r) => rebuild_pow(simplify(u), *r),
        Expr::Neg(u) => rebuild_prod(vec![Expr::Const(-1.0), simplify(u)]),
        Expr::Sin(u) => fold_unary(simplify(u), f64::sin, Expr::Sin),
        Expr::Cos(u) => fold_unary(simplify(u), f64::cos, Expr::Cos),
        Expr::Exp(u) => fold_unary(simplify(u), f64::exp, Expr::Exp),
        Expr::Log(u) => {
            let inner = simplify(u);
            if let Expr::Const(c) = inner {
                if c > 0.0 && c.ln().is_finite() {
                    return Expr::Const(c.ln());
                }
            }
            Expr::Log(Box::new(inner))
        }
    }
}

fn fold_unary(inner: Expr, f: fn(f64) -> f64, wrap: fn(Box<Expr>) -> Expr) -> Expr {
    if let Expr::Const(c) = inner {
        let v = f(c);
        if v.is_finite() {
            return Expr::Const(v);
        }
    }
    wrap(Box::new(inner))
}

fn rebuild_pow(base: Expr, r: Rational) -> Expr {
    if r.is_zero() {
        return Expr::Const(1.0);
    }
    if r.is_one() {
        return base;
    }
    if let Expr::Const(c) = base {
        if let Ok(v) = pow_value(c, r) {
            return Expr::Const(v);
        }
        return Expr::Pow(Box::new(Expr::Const(c)), r);
    }
    // (u^s)^k with integer k is u^(s*k) for every u; fractional outer
    // exponents must stay nested ((x^2)^(1/2) is |x|, not x).
    if r.is_integer() {
        if let Expr::Pow(inner, s) = base {
            return rebuild_pow(*inner, s.mul(r));
        }
    }
    Expr::Pow(Box::new(base), r)
}

/// Split a canonical term into (coefficient, coefficient-free core).
fn coeff_core(e: Expr) -> (f64, Expr) {
    match e {
        Expr::Prod(mut fs) => {
            if matches!(fs.first(), Some(Expr::Const(_))) {
                let c = match fs.remove(0) {
                    Expr::Const(c) => c,
                    _ => unreachable!(),
                };
                debug_assert!(!fs.is_empty(), "canonical product with lone constant");
                let core = if fs.len() == 1 {
                    fs.pop().unwrap()
                } else {
                    Expr::Prod(fs)
                };
                (c, core)
            } else {
                (1.0, Expr::Prod(fs))
            }
        }
        other => (1.0, other),
    }
}

fn prepend_coeff(c: f64, core: Expr) -> Expr {
    match core {
        Expr::Prod(mut fs) => {
            fs.insert(0, Expr::Const(c));
            Expr::Prod(fs)
        }
        other => Expr::Prod(vec![Expr::Const(c), other]),
    }
}

fn rebuild_sum(children: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(children.len());
    for c in children {
        match c {
            Expr::Sum(cs) => flat.extend(cs),
            other => flat.push(other),
        }
    }
    let mut const_acc = 0.0f64;
    let mut terms: BTreeMap<OrdExpr, f64> = BTreeMap::new();
    for c in flat {
        match c {
            Expr::Const(v) => const_acc += v,
            other => {
                let (coeff, core) = coeff_core(other);
                *terms.entry(OrdExpr(core)).or_insert(0.0) += coeff;
            }
        }
    }
    let mut out = Vec::new();
    if const_acc != 0.0 {
        out.push(Expr::Const(const_acc));
    }
    for (OrdExpr(core), coeff) in terms {
        if coeff == 0.0 {
            continue;
        }
        if coeff == 1.0 {
            out.push(core);
        } else {
            out.push(prepend_coeff(coeff, core));
        }
    }
    match out.len() {
        0 => Expr::Const(0.0),
        1 => out.pop().unwrap(),
        _ => Expr::Sum(out),
    }
}

fn rebuild_prod(children: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(children.len());
    for c in children {
        match c {
            Expr::Prod(cs) => flat.extend(cs),
            other => flat.push(other),
        }
    }
    let mut const_acc = 1.0f64;
    let mut bases: BTreeMap<OrdExpr, Rational> = BTreeMap::new();
    for c in flat {
        match c {
            Expr::Const(v) => const_acc *= v,
            Expr::Pow(b, r) => {
                let cur = bases.entry(OrdExpr(*b)).or_insert(Rational::int(0));
                *cur = cur.add(r);
            }
            other => {
                let cur = bases.entry(OrdExpr(other)).or_insert(Rational::int(0));
                *cur = cur.add(Rational::int(1));
            }
        }
    }
    if const_acc == 0.0 {
        return Expr::Const(0.0);
    }
    let mut factors = Vec::new();
    for (OrdExpr(base), r) in bases {
        if r.is_zero() {
            continue;
        }
        if r.is_one() {
            factors.push(base);
        } else {
            factors.push(Expr::Pow(Box::new(base), r));
        }
    }
    if factors.is_empty() {
        return Expr::Const(const_acc);
    }
    // c * (t1 + t2 + ...) distributes when the sum is the only factor, so
    // negated determinants cancel term by term against their expansions.
    if factors.len() == 1 && const_acc != 1.0 {
        if let Expr::Sum(ts) = &factors[0] {
            let ts = ts.clone();
            return rebuild_sum(
                ts.into_iter()
                    .map(|t| rebuild_prod(vec![Expr::Const(const_acc), t]))
                    .collect(),
            );
        }
    }
    if const_acc != 1.0 {
        factors.insert(0, Expr::Const(const_acc));
    }
    match factors.len() {
        1 => factors.pop().unwrap(),
        _ => Expr::Prod(factors),
    }
}

#[cfg(test)]
mod tests {
    use super::super::parse;
    use super::*;

    fn s(src: &str) -> Expr {
        simplify(&parse(src).unwrap())
    }

    #[test]
    fn exact_cancellation() {
        assert_eq!(s("x1*x2 - x2*x1"), Expr::Const(0.0));
        assert_eq!(s("x1 + x1 - 2*x1"), Expr::Const(0.0));
        assert_eq!(s("exp(x1)*cos(x2) - cos(x2)*exp(x1)"), Expr::Const(0.0));
    }

    #[test]
    fn like_terms_merge() {
        assert_eq!(s("x1 + x1"), parse("2*x1").unwrap());
        assert_eq!(s("3*x1*x2 + x2*x1"), parse("4*x1*x2").unwrap());
        assert_eq!(s("x1*x1"), parse("x1^2").unwrap());
        assert_eq!(s("x1^3*x1^-1"), parse("x1^2").unwrap());
    }

    #[test]
    fn constants_fold() {
        assert_eq!(s("2 + 3*4"), Expr::Const(14.0));
        assert_eq!(s("sin(0) + exp(0)"), Expr::Const(1.0));
        assert_eq!(s("2^3/4"), Expr::Const(2.0f64.powf(0.75)));
        assert_eq!(s("(2^3)/4"), Expr::Const(2.0));
    }

    #[test]
    fn zero_annihilates() {
        assert_eq!(s("0*exp(x1)"), Expr::Const(0.0));
        assert_eq!(s("x1*0*x2"), Expr::Const(0.0));
    }

    #[test]
    fn neg_becomes_coefficient() {
        assert_eq!(s("-x1"), parse("-1*x1").unwrap());
        assert_eq!(s("-(x1 + x2)"), s("-x1 - x2"));
    }

    #[test]
    fn pow_merging_respects_domains() {
        assert_eq!(s("(x1^2)^3"), parse("x1^6").unwrap());
        let e = s("(x1^2)^1/2");
        assert_eq!(
            e,
            Expr::Pow(
                Box::new(Expr::Pow(Box::new(Expr::Var(1)), Rational::int(2))),
                Rational::new(1, 2)
            )
        );
    }

    #[test]
    fn idempotent_on_samples() {
        for src in [
            "x1*x2 + sin(x1)^2 - x2*x1",
            "(x1 + x2)^2/x3 - exp(x1*x2)",
            "-(x1 - x2)*(x1 + x2)",
            "log(x1)/x1 + x1^-1",
            "2*x1 - x1 - x1 + 7",
        ] {
            let once = s(src);
            let twice = simplify(&once);
            assert_eq!(once, twice, "not idempotent on {src}");
        }
    }

    #[test]
    fn eval_preserved() {
        let pts = [[0.7, -1.3, 2.1], [1.5, 0.4, -0.9], [2.0, 1.0, 1.0]];
        for src in [
            "x1*(x2 + x3) - x1*x2",
            "exp(x1)*exp(x1)",
            "(x1^2 + x2^2)*x3 - x3*x2^2",
            "sin(x1)*sin(x1) + cos(x1)*cos(x1)",
        ] {
            let e = parse(src).unwrap();
            let se = simplify(&e);
            for p in &pts {
                let a = e.eval(p).unwrap();
                let b = se.eval(p).unwrap();
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "{src} at {p:?}: {a} vs {b}"
                );
            }
        }
    }
}
