//! Adaptive tensor-product Gauss-Legendre quadrature over axis cells.
//!
//! A cell is accepted when both error signals are quiet: splitting it along
//! its widest axis barely moves the 7-node estimate, and the embedded
//! 5-node rule agrees with the 7-node one. The second signal matters for
//! separable integrands, where a split along one axis reproduces another
//! axis's aliasing exactly and the split comparison alone reads zero.
//! The tolerance has a relative part against the running root estimate and
//! a small absolute floor so integrals that cancel to zero still terminate.

use crate::numeric::{GL5_NODES, GL5_WEIGHTS, GL7_NODES, GL7_WEIGHTS};

#[derive(Debug, Clone, Copy)]
pub struct Quadrature {
    pub value: f64,
    pub cells: usize,
    pub max_depth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuadError {
    /// The integrand failed to evaluate at a quadrature node.
    EvalFailed,
    /// The refinement budget ran out before the tolerance was met.
    BudgetExhausted,
}

impl std::fmt::Display for QuadError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuadError::EvalFailed => write!(f, "integrand evaluation failed"),
            QuadError::BudgetExhausted => write!(f, "quadrature budget exhausted"),
        }
    }
}

impl std::error::Error for QuadError {}

const MAX_DEPTH: usize = 40;
const MAX_CELLS: usize = 400_000;

fn gl_cell<F>(g: &F, lo: &[f64], hi: &[f64], nodes: &[f64], weights: &[f64]) -> Option<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    let dim = lo.len();
    let order = nodes.len();
    let mut idx = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    let mut total = 0.0;
    loop {
        let mut w = 1.0;
        for a in 0..dim {
            let mid = 0.5 * (lo[a] + hi[a]);
            let half = 0.5 * (hi[a] - lo[a]);
            point[a] = mid + half * nodes[idx[a]];
            w *= half * weights[idx[a]];
        }
        total += w * g(&point)?;
        // mixed-radix increment over the order^dim node grid
        let mut a = 0;
        loop {
            if a == dim {
                return Some(total);
            }
            idx[a] += 1;
            if idx[a] < order {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
    }
}

fn gl7_cell<F>(g: &F, lo: &[f64], hi: &[f64]) -> Option<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    gl_cell(g, lo, hi, &GL7_NODES, &GL7_WEIGHTS)
}

fn gl5_cell<F>(g: &F, lo: &[f64], hi: &[f64]) -> Option<f64>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    gl_cell(g, lo, hi, &GL5_NODES, &GL5_WEIGHTS)
}

struct Driver<'a, F> {
    g: &'a F,
    tol_rel: f64,
    /// Absolute slack per unit of cell volume, so the floor a cell receives
    /// shrinks with the cell.
    floor_density: f64,
    cells: usize,
    max_depth: usize,
}

impl<F> Driver<'_, F>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    fn refine(
        &mut self,
        lo: &[f64],
        hi: &[f64],
        whole: f64,
        depth: usize,
    ) -> Result<f64, QuadError> {
        self.cells += 1;
        if self.cells > MAX_CELLS {
            return Err(QuadError::BudgetExhausted);
        }
        self.max_depth = self.max_depth.max(depth);
        let axis = widest_axis(lo, hi);
        let mid = 0.5 * (lo[axis] + hi[axis]);
        let mut hi_left = hi.to_vec();
        hi_left[axis] = mid;
        let mut lo_right = lo.to_vec();
        lo_right[axis] = mid;
        let left = gl7_cell(self.g, lo, &hi_left).ok_or(QuadError::EvalFailed)?;
        let right = gl7_cell(self.g, &lo_right, hi).ok_or(QuadError::EvalFailed)?;
        let embedded = gl5_cell(self.g, lo, hi).ok_or(QuadError::EvalFailed)?;
        let split = left + right;
        let err = (whole - split).abs().max((whole - embedded).abs());
        let volume: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
        if err <= self.tol_rel * split.abs() + self.floor_density * volume || depth >= MAX_DEPTH {
            return Ok(split);
        }
        let a = self.refine(lo, &hi_left, left, depth + 1)?;
        let b = self.refine(&lo_right, hi, right, depth + 1)?;
        Ok(a + b)
    }
}

fn widest_axis(lo: &[f64], hi: &[f64]) -> usize {
    let mut axis = 0;
    let mut best = hi[0] - lo[0];
    for a in 1..lo.len() {
        if hi[a] - lo[a] > best {
            best = hi[a] - lo[a];
            axis = a;
        }
    }
    axis
}

/// Integrate over an axis cell to a relative tolerance.
pub fn adaptive_cell<F>(
    g: &F,
    lo: &[f64],
    hi: &[f64],
    rel_tol: f64,
) -> Result<Quadrature, QuadError>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    assert_eq!(lo.len(), hi.len());
    assert!(!lo.is_empty());
    let root = gl7_cell(g, lo, hi).ok_or(QuadError::EvalFailed)?;
    let total_volume: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
    let floor_density = (1e-12 + rel_tol * root.abs() * 1e-3) / total_volume;
    let mut driver = Driver {
        g,
        tol_rel: rel_tol,
        floor_density,
        cells: 0,
        max_depth: 0,
    };
    let value = driver.refine(lo, hi, root, 0)?;
    Ok(Quadrature {
        value,
        cells: driver.cells,
        max_depth: driver.max_depth,
    })
}

/// Integrate over the unit cube [0,1]^dim.
pub fn adaptive_cube<F>(g: &F, dim: usize, rel_tol: f64) -> Result<Quadrature, QuadError>
where
    F: Fn(&[f64]) -> Option<f64>,
{
    adaptive_cell(g, &vec![0.0; dim], &vec![1.0; dim], rel_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        // GL7 integrates degree-13 polynomials exactly per axis
        let q = adaptive_cube(&|p: &[f64]| Some(p[0].powi(9)), 1, 1e-10).unwrap();
        assert!((q.value - 0.1).abs() < 1e-13);
        assert_eq!(q.cells, 1);
    }

    #[test]
    fn two_dim_product() {
        let g = |p: &[f64]| Some((p[0] * p[1]).exp());
        let q = adaptive_cube(&g, 2, 1e-10).unwrap();
        // int_0^1 int_0^1 exp(xy) = sum 1/(n+1)!/(n+1) ... = 1.3179021514544038
        assert!((q.value - 1.317_902_151_454_403_8).abs() < 1e-9, "{}", q.value);
    }

    #[test]
    fn absolute_value_kink() {
        let g = |p: &[f64]| Some((p[0] - 1.0 / 3.0).abs());
        let q = adaptive_cube(&g, 1, 1e-8).unwrap();
        let exact = (1.0 / 9.0 + 4.0 / 9.0) / 2.0;
        assert!((q.value - exact).abs() < 1e-7 * exact, "{}", q.value);
        assert!(q.cells > 1);
    }

    #[test]
    fn cancelling_integrand_terminates() {
        let g = |p: &[f64]| Some((2.0 * std::f64::consts::PI * p[0]).sin());
        let q = adaptive_cube(&g, 1, 1e-8).unwrap();
        assert!(q.value.abs() < 1e-10);
    }

    #[test]
    fn sqrt_singular_derivative() {
        let q = adaptive_cube(&|p: &[f64]| Some(p[0].sqrt()), 1, 1e-8).unwrap();
        assert!((q.value - 2.0 / 3.0).abs() < 1e-8, "{}", q.value);
    }

    #[test]
    fn three_dim_smooth() {
        let g = |p: &[f64]| Some((p[0] + p[1] + p[2]).exp());
        let q = adaptive_cell(&g, &[0.0; 3], &[1.0; 3], 1e-8).unwrap();
        let e1 = std::f64::consts::E - 1.0;
        assert!((q.value - e1.powi(3)).abs() < 1e-7, "{}", q.value);
    }

    #[test]
    fn eval_failure_propagates() {
        let g = |p: &[f64]| if p[0] > 0.9 { None } else { Some(1.0) };
        assert!(matches!(
            adaptive_cube(&g, 1, 1e-6),
            Err(QuadError::EvalFailed)
        ));
    }
}
