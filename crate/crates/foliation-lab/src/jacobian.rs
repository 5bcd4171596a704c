//! Symbolic Jacobians, cofactor vector fields, and the algebraic identities
//! they satisfy.
//!
//! For F = (f_1, ..., f_n) with DF = (a_ij), the i-th cofactor field V_i has
//! j-th component (-1)^(i+j) times the minor obtained by deleting row i and
//! column j. By construction V_i(f_k) = delta_ik det DF, and each product
//! f_i V_i has divergence det DF because cofactor rows are divergence free.

use crate::expr::{simplify, Expr, EvalError};
use crate::map::SmoothMap;
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct JacobianBundle {
    n: usize,
    entries: Vec<Vec<Expr>>,
    det: Expr,
}

fn minor_of(m: &[Vec<Expr>], row: usize, col: usize) -> Vec<Vec<Expr>> {
    let mut out = Vec::with_capacity(m.len() - 1);
    for (i, r) in m.iter().enumerate() {
        if i == row {
            continue;
        }
        let mut nr = Vec::with_capacity(r.len() - 1);
        for (j, e) in r.iter().enumerate() {
            if j == col {
                continue;
            }
            nr.push(e.clone());
        }
        out.push(nr);
    }
    out
}

/// Laplace expansion along the first row, pruning structurally zero entries.
/// Fine up to n = 8; SmoothMap enforces that bound.
pub(crate) fn det_expr(m: &[Vec<Expr>]) -> Expr {
    if m.len() == 1 {
        return m[0][0].clone();
    }
    let mut terms = Vec::new();
    for j in 0..m.len() {
        if m[0][j].is_zero_const() {
            continue;
        }
        let sub = det_expr(&minor_of(m, 0, j));
        if sub.is_zero_const() {
            continue;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        terms.push(Expr::Prod(vec![
            Expr::Const(sign),
            m[0][j].clone(),
            sub,
        ]));
    }
    simplify(&Expr::Sum(terms))
}

impl JacobianBundle {
    pub fn new(map: &SmoothMap) -> Self {
        let n = map.dim();
        let entries: Vec<Vec<Expr>> = (1..=n)
            .map(|i| (1..=n).map(|j| map.component(i).diff(j)).collect())
            .collect();
        let det = det_expr(&entries);
        JacobianBundle { n, entries, det }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// entries()[i][j] is the simplified d f_{i+1} / d x_{j+1}.
    pub fn entries(&self) -> &[Vec<Expr>] {
        &self.entries
    }

    pub fn det(&self) -> &Expr {
        &self.det
    }

    pub fn det_at(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.det.eval(x)
    }

    pub fn matrix_at(&self, x: &[f64]) -> Result<Vec<Vec<f64>>, EvalError> {
        self.entries
            .iter()
            .map(|row| row.iter().map(|e| e.eval(x)).collect())
            .collect()
    }

    /// Cofactor field V_i (1-based): component j is the signed (i, j) minor.
    pub fn cofactor_field(&self, i: usize) -> Vec<Expr> {
        assert!((1..=self.n).contains(&i));
        (1..=self.n)
            .map(|j| {
                let sub = det_expr(&minor_of(&self.entries, i - 1, j - 1));
                let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
                simplify(&Expr::Prod(vec![Expr::Const(sign), sub]))
            })
            .collect()
    }

    pub fn all_cofactor_fields(&self) -> Vec<Vec<Expr>> {
        (1..=self.n).map(|i| self.cofactor_field(i)).collect()
    }
}

/// Planar Hamiltonian field of a scalar: H_g = (-d g/d x2, d g/d x1).
/// Its integral curves run along the level sets of g.
pub fn hamiltonian_field(g: &Expr) -> [Expr; 2] {
    [
        simplify(&Expr::Neg(Box::new(g.diff(2)))),
        g.diff(1),
    ]
}

pub fn eval_field(field: &[Expr], x: &[f64]) -> Result<Vec<f64>, EvalError> {
    field.iter().map(|e| e.eval(x)).collect()
}

/// Outcome of checking one identity over a point cloud. Points where some
/// expression leaves its domain (overflow, log of a nonpositive value) are
/// skipped and counted rather than failed.
#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub label: String,
    pub checked_points: usize,
    pub skipped_points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn run_check(
    label: String,
    points: &[Vec<f64>],
    tolerance: f64,
    mut rel_err_at: impl FnMut(&[f64]) -> Result<f64, EvalError>,
) -> IdentityCheck {
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst = 0.0f64;
    for p in points {
        match rel_err_at(p) {
            Ok(e) => {
                checked += 1;
                worst = worst.max(e);
            }
            Err(_) => skipped += 1,
        }
    }
    IdentityCheck {
        label,
        checked_points: checked,
        skipped_points: skipped,
        max_rel_error: worst,
        tolerance,
        pass: checked > 0 && worst <= tolerance,
    }
}

impl JacobianBundle {
    /// V_i(f_k) = delta_ik det DF at every sample point, relative to 1 + |det|.
    pub fn verify_duality(&self, points: &[Vec<f64>], tolerance: f64) -> IdentityCheck {
        let cof = self.all_cofactor_fields();
        run_check("duality".into(), points, tolerance, |x| {
            let a = self.matrix_at(x)?;
            let d = self.det_at(x)?;
            let scale = 1.0 + d.abs();
            let mut worst = 0.0f64;
            for (i, vi) in cof.iter().enumerate() {
                let v = eval_field(vi, x)?;
                for (k, row) in a.iter().enumerate() {
                    let lhs: f64 = row.iter().zip(&v).map(|(a, c)| a * c).sum();
                    let target = if i == k { d } else { 0.0 };
                    worst = worst.max((lhs - target).abs() / scale);
                }
            }
            Ok(worst)
        })
    }

    /// div(f_i V_i) = det DF with the divergence expanded symbolically.
    pub fn verify_divergence_symbolic(
        &self,
        map: &SmoothMap,
        points: &[Vec<f64>],
        tolerance: f64,
    ) -> Vec<IdentityCheck> {
        (1..=self.n)
            .map(|i| {
                let vi = self.cofactor_field(i);
                let mut terms: Vec<Expr> = (1..=self.n)
                    .map(|j| {
                        Expr::Prod(vec![map.component(i).clone(), vi[j - 1].clone()]).diff(j)
                    })
                    .collect();
                terms.push(Expr::Neg(Box::new(self.det.clone())));
                let residual = simplify(&Expr::Sum(terms));
                run_check(format!("divergence f{i}V{i} symbolic"), points, tolerance, |x| {
                    let d = self.det_at(x)?;
                    Ok(residual.eval(x)?.abs() / (1.0 + d.abs()))
                })
            })
            .collect()
    }

    /// Same identity with the divergence taken by central differences.
    pub fn verify_divergence_numeric(
        &self,
        map: &SmoothMap,
        points: &[Vec<f64>],
        tolerance: f64,
    ) -> Vec<IdentityCheck> {
        (1..=self.n)
            .map(|i| {
                let vi = self.cofactor_field(i);
                let fi = map.component(i).clone();
                run_check(format!("divergence f{i}V{i} numeric"), points, tolerance, |x| {
                    let d = self.det_at(x)?;
                    let mut div = 0.0;
                    for j in 0..self.n {
                        let h = 1e-5 * (1.0 + x[j].abs());
                        let mut xp = x.to_vec();
                        let mut xm = x.to_vec();
                        xp[j] += h;
                        xm[j] -= h;
                        let gp = fi.eval(&xp)? * vi[j].eval(&xp)?;
                        let gm = fi.eval(&xm)? * vi[j].eval(&xm)?;
                        div += (gp - gm) / (xp[j] - xm[j]);
                    }
                    Ok((div - d).abs() / (1.0 + d.abs()))
                })
            })
            .collect()
    }

    /// Rows of the cofactor matrix are divergence free.
    pub fn verify_cofactor_rows_divergence_free(
        &self,
        points: &[Vec<f64>],
        tolerance: f64,
    ) -> Vec<IdentityCheck> {
        (1..=self.n)
            .map(|i| {
                let vi = self.cofactor_field(i);
                let divergence = simplify(&Expr::Sum(
                    (1..=self.n).map(|j| vi[j - 1].diff(j)).collect(),
                ));
                run_check(format!("div V{i} = 0"), points, tolerance, |x| {
                    let scale = 1.0
                        + eval_field(&vi, x)?
                            .iter()
                            .fold(0.0f64, |m, v| m.max(v.abs()));
                    Ok(divergence.eval(x)?.abs() / scale)
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::geom::AxisBox;

    fn braun() -> SmoothMap {
        SmoothMap::new(
            "braun",
            vec![parse("x1*(1 + x1*x2)").unwrap(), parse("x2").unwrap()],
            AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
        )
        .unwrap()
    }

    fn spiral3() -> SmoothMap {
        SmoothMap::new(
            "spiral3",
            vec![
                parse("exp(x1)*cos(x2)").unwrap(),
                parse("exp(x1)*sin(x2)").unwrap(),
                parse("x3").unwrap(),
            ],
            AxisBox::new(vec![-2.0, 0.05, -1.0], vec![2.0, 3.1, 1.0]),
        )
        .unwrap()
    }

    fn cloud(map: &SmoothMap, count: usize) -> Vec<Vec<f64>> {
        (0..count).map(|i| map.domain().halton_point(i)).collect()
    }

    #[test]
    fn braun_det_and_cofactors() {
        let m = braun();
        let j = JacobianBundle::new(&m);
        assert_eq!(j.det_at(&[1.0, 1.0]).unwrap(), 3.0);
        let v2 = j.cofactor_field(2);
        // V2 = (-x1^2, 1 + 2 x1 x2)
        assert_eq!(v2[0], parse("-x1^2").map(|e| simplify(&e)).unwrap());
        let v1 = j.cofactor_field(1);
        assert_eq!(v1[0], Expr::Const(1.0));
        assert_eq!(v1[1], Expr::Const(0.0));
    }

    #[test]
    fn spiral_third_cofactor_vanishes_structurally() {
        let m = spiral3();
        let j = JacobianBundle::new(&m);
        let v3 = j.cofactor_field(3);
        assert_eq!(v3[0], Expr::Const(0.0));
        assert_eq!(v3[1], Expr::Const(0.0));
        // third component equals exp(2 x1) pointwise
        for p in cloud(&m, 20) {
            let got = v3[2].eval(&p).unwrap();
            let want = (2.0 * p[0]).exp();
            assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn duality_identity() {
        for m in [braun(), spiral3()] {
            let j = JacobianBundle::new(&m);
            let check = j.verify_duality(&cloud(&m, 40), 1e-8);
            assert!(check.pass, "{check:?}");
        }
    }

    #[test]
    fn divergence_identity_both_modes() {
        for m in [braun(), spiral3()] {
            let j = JacobianBundle::new(&m);
            for c in j.verify_divergence_symbolic(&m, &cloud(&m, 25), 1e-10) {
                assert!(c.pass, "{c:?}");
            }
            for c in j.verify_divergence_numeric(&m, &cloud(&m, 25), 1e-6) {
                assert!(c.pass, "{c:?}");
            }
            for c in j.verify_cofactor_rows_divergence_free(&cloud(&m, 25), 1e-10) {
                assert!(c.pass, "{c:?}");
            }
        }
    }

    #[test]
    fn hamiltonian_of_dive_function() {
        let g = parse("x1*(1 - x1*x2^2)").unwrap();
        let h = hamiltonian_field(&g);
        // H_g = (2 x1^2 x2, 1 - 2 x1 x2^2)
        for p in [[0.5, 0.3], [1.2, -0.7], [2.0, 1.0]] {
            let hx = h[0].eval(&p).unwrap();
            let hy = h[1].eval(&p).unwrap();
            assert!((hx - 2.0 * p[0] * p[0] * p[1]).abs() < 1e-12);
            assert!((hy - (1.0 - 2.0 * p[0] * p[1] * p[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn duality_fails_for_wrong_field() {
        // Sanity: the checker can fail. Perturb one cofactor component.
        let m = braun();
        let j = JacobianBundle::new(&m);
        let pts = cloud(&m, 10);
        let check = run_check("broken".into(), &pts, 1e-8, |x| {
            let d = j.det_at(x)?;
            Ok((d + 0.5).abs() / (1.0 + d.abs()))
        });
        assert!(!check.pass);
    }
}
