//! Smooth maps F: R^n -> R^n given componentwise in the expression DSL,
//! plus the on-disk map file format.

use crate::expr::{parse, Expr, EvalError, ParseError};
use crate::geom::AxisBox;
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct SmoothMap {
    name: String,
    components: Vec<Expr>,
    domain: AxisBox,
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("map file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl SmoothMap {
    /// Dimension must be 2..=8 and every component may mention x1..xn only.
    pub fn new(name: impl Into<String>, components: Vec<Expr>, domain: AxisBox) -> Result<Self, MapError> {
        let n = components.len();
        if !(2..=8).contains(&n) {
            return Err(MapError::Invalid(format!(
                "dimension {n} out of range (2..=8)"
            )));
        }
        if domain.dim() != n {
            return Err(MapError::Invalid(format!(
                "box dimension {} does not match map dimension {n}",
                domain.dim()
            )));
        }
        for (i, c) in components.iter().enumerate() {
            let mv = c.max_var();
            if mv > n {
                return Err(MapError::Invalid(format!(
                    "component f{} mentions x{mv} but the dimension is {n}",
                    i + 1
                )));
            }
        }
        Ok(SmoothMap {
            name: name.into(),
            components,
            domain,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Expr] {
        &self.components
    }

    /// 1-based component accessor.
    pub fn component(&self, i: usize) -> &Expr {
        &self.components[i - 1]
    }

    pub fn domain(&self) -> &AxisBox {
        &self.domain
    }

    pub fn with_domain(&self, domain: AxisBox) -> Result<SmoothMap, MapError> {
        SmoothMap::new(self.name.clone(), self.components.clone(), domain)
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.components.iter().map(|c| c.eval(x)).collect()
    }

    /// Parse the line-oriented map file format:
    ///
    /// ```text
    /// # comment
    /// name = spiral
    /// dim = 3
    /// f1 = exp(x1)*cos(x2)
    /// f2 = exp(x1)*sin(x2)
    /// f3 = x3
    /// box = [-2, 2] x [0, 3.2] x [-1, 1]
    /// ```
    pub fn parse_file(text: &str) -> Result<SmoothMap, MapError> {
        let mut name: Option<String> = None;
        let mut dim: Option<usize> = None;
        let mut comps: Vec<Option<(usize, Expr)>> = Vec::new();
        let mut domain: Option<AxisBox> = None;

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| MapError::Syntax {
                line: line_no,
                message: "expected 'key = value'".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            let dup = |what: &str| MapError::Syntax {
                line: line_no,
                message: format!("duplicate '{what}'"),
            };
            match key {
                "name" => {
                    if name.replace(value.to_string()).is_some() {
                        return Err(dup("name"));
                    }
                }
                "dim" => {
                    let d: usize = value.parse().map_err(|_| MapError::Syntax {
                        line: line_no,
                        message: format!("bad dimension '{value}'"),
                    })?;
                    if dim.replace(d).is_some() {
                        return Err(dup("dim"));
                    }
                }
                "box" => {
                    let b = parse_box(value).map_err(|message| MapError::Syntax {
                        line: line_no,
                        message,
                    })?;
                    if domain.replace(b).is_some() {
                        return Err(dup("box"));
                    }
                }
                _ => {
                    let k = key
                        .strip_prefix('f')
                        .and_then(|s| s.parse::<usize>().ok())
                        .filter(|k| *k >= 1)
                        .ok_or_else(|| MapError::Syntax {
                            line: line_no,
                            message: format!("unknown key '{key}'"),
                        })?;
                    if comps.iter().flatten().any(|(i, _)| *i == k) {
                        return Err(dup(&format!("f{k}")));
                    }
                    let e = parse(value).map_err(|pe: ParseError| MapError::Syntax {
                        line: line_no,
                        message: format!("f{k}: {pe}"),
                    })?;
                    comps.push(Some((k, e)));
                }
            }
        }

        let n = dim.ok_or_else(|| MapError::Invalid("missing 'dim'".into()))?;
        let domain = domain.ok_or_else(|| MapError::Invalid("missing 'box'".into()))?;
        let mut ordered: Vec<Option<Expr>> = vec![None; n];
        for (k, e) in comps.into_iter().flatten() {
            if k > n {
                return Err(MapError::Invalid(format!(
                    "component f{k} exceeds dim = {n}"
                )));
            }
            ordered[k - 1] = Some(e);
        }
        let components: Vec<Expr> = ordered
            .into_iter()
            .enumerate()
            .map(|(i, c)| c.ok_or_else(|| MapError::Invalid(format!("missing component f{}", i + 1))))
            .collect::<Result<_, _>>()?;
        SmoothMap::new(name.unwrap_or_else(|| "unnamed".into()), components, domain)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Parse `[lo, hi] x [lo, hi] x ...`.
pub fn parse_box(s: &str) -> Result<AxisBox, String> {
    let mut lo = Vec::new();
    let mut hi = Vec::new();
    let mut rest = s.trim();
    loop {
        if !rest.starts_with('[') {
            return Err(format!("expected '[' in box near '{rest}'"));
        }
        let close = rest.find(']').ok_or_else(|| "unclosed '[' in box".to_string())?;
        let inner = &rest[1..close];
        let (a, b) = inner
            .split_once(',')
            .ok_or_else(|| format!("expected 'lo, hi' in '[{inner}]'"))?;
        let a: f64 = a.trim().parse().map_err(|_| format!("bad number '{}'", a.trim()))?;
        let b: f64 = b.trim().parse().map_err(|_| format!("bad number '{}'", b.trim()))?;
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(format!("bad interval [{a}, {b}]"));
        }
        lo.push(a);
        hi.push(b);
        rest = rest[close + 1..].trim_start();
        if rest.is_empty() {
            break;
        }
        rest = rest
            .strip_prefix('x')
            .ok_or_else(|| format!("expected 'x' between intervals near '{rest}'"))?
            .trim_start();
    }
    Ok(AxisBox::new(lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    const SPIRAL: &str = "\
# polar exponential in the plane, suspended trivially
name = spiral
dim = 3
f1 = exp(x1)*cos(x2)
f2 = exp(x1)*sin(x2)
f3 = x3
box = [-2, 2] x [0.05, 3.1] x [-1, 1]
";

    #[test]
    fn parses_map_file() {
        let m = SmoothMap::parse_file(SPIRAL).unwrap();
        assert_eq!(m.name(), "spiral");
        assert_eq!(m.dim(), 3);
        let y = m.eval(&[0.0, 0.0, 0.5]).unwrap();
        assert_eq!(y, vec![1.0, 0.0, 0.5]);
        assert_eq!(m.domain().lo()[1], 0.05);
    }

    #[test]
    fn missing_component_rejected() {
        let bad = "dim = 2\nf1 = x1\nbox = [0,1] x [0,1]\n";
        let err = SmoothMap::parse_file(bad).unwrap_err();
        assert!(err.to_string().contains("missing component f2"));
    }

    #[test]
    fn dimension_bounds() {
        let bad = "dim = 1\nf1 = x1\nbox = [0,1]\n";
        assert!(SmoothMap::parse_file(bad).is_err());
        let bad = "dim = 2\nf1 = x3\nf2 = x2\nbox = [0,1] x [0,1]\n";
        let err = SmoothMap::parse_file(bad).unwrap_err();
        assert!(err.to_string().contains("mentions x3"));
    }

    #[test]
    fn box_syntax() {
        let b = parse_box("[-1, 1] x [0, 2.5]").unwrap();
        assert_eq!(b.lo(), &[-1.0, 0.0]);
        assert_eq!(b.hi(), &[1.0, 2.5]);
        assert!(parse_box("[1, -1]").is_err());
        assert!(parse_box("[0, 1] [0, 1]").is_err());
    }

    #[test]
    fn duplicate_keys_rejected() {
        let bad = "dim = 2\ndim = 2\nf1 = x1\nf2 = x2\nbox = [0,1] x [0,1]\n";
        assert!(SmoothMap::parse_file(bad).is_err());
    }
}
