//! Axis-aligned boxes and low-discrepancy sampling.

use serde::{Deserialize, Serialize};

/// Closed axis-aligned box, lo[i] < hi[i] on every axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl AxisBox {
    /// Panics unless dimensions match and every interval is nondegenerate.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "box bounds of different dimension");
        assert!(!lo.is_empty(), "zero-dimensional box");
        for i in 0..lo.len() {
            assert!(
                lo[i] < hi[i] && lo[i].is_finite() && hi[i].is_finite(),
                "bad interval [{}, {}] on axis {}",
                lo[i],
                hi[i],
                i + 1
            );
        }
        AxisBox { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_slack(x, 0.0)
    }

    pub fn contains_slack(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *v >= l - slack && *v <= h + slack)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (h - l))
            .collect()
    }

    /// Euclidean half-diagonal: distance from the center to a corner.
    pub fn radius(&self) -> f64 {
        self.half_widths().iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.radius()
    }

    /// Largest distance from the origin to a corner.
    pub fn outer_radius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| l.abs().max(h.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every half-width by `factor` about the center.
    pub fn scaled(&self, factor: f64) -> AxisBox {
        assert!(factor > 0.0);
        let c = self.center();
        let w = self.half_widths();
        AxisBox::new(
            c.iter().zip(&w).map(|(c, w)| c - factor * w).collect(),
            c.iter().zip(&w).map(|(c, w)| c + factor * w).collect(),
        )
    }

    /// Grow by an absolute margin on every side.
    pub fn padded(&self, margin: f64) -> AxisBox {
        assert!(margin >= 0.0);
        AxisBox::new(
            self.lo.iter().map(|l| l - margin).collect(),
            self.hi.iter().map(|h| h + margin).collect(),
        )
    }

    /// Map unit-cube coordinates into the box.
    pub fn sample(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.dim());
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(t, (l, h))| l + t * (h - l))
            .collect()
    }

    /// Point `index` of the Halton sequence scaled into the box.
    pub fn halton_point(&self, index: usize) -> Vec<f64> {
        let u: Vec<f64> = (0..self.dim())
            .map(|axis| halton(index + 1, HALTON_BASES[axis % HALTON_BASES.len()]))
            .collect();
        self.sample(&u)
    }

    /// Smallest box containing both.
    pub fn hull(&self, other: &AxisBox) -> AxisBox {
        assert_eq!(self.dim(), other.dim());
        AxisBox::new(
            self.lo
                .iter()
                .zip(&other.lo)
                .map(|(a, b)| a.min(*b))
                .collect(),
            self.hi
                .iter()
                .zip(&other.hi)
                .map(|(a, b)| a.max(*b))
                .collect(),
        )
    }
}

pub const HALTON_BASES: [usize; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Radical-inverse of `i` in the given base; i >= 1 for interior points.
pub fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_basics() {
        let b = AxisBox::new(vec![-1.0, 0.0], vec![1.0, 4.0]);
        assert!(b.contains(&[0.0, 2.0]));
        assert!(b.contains(&[1.0, 4.0]));
        assert!(!b.contains(&[1.1, 2.0]));
        assert!(b.contains_slack(&[1.05, 2.0], 0.1));
        assert_eq!(b.center(), vec![0.0, 2.0]);
        let r = b.radius();
        assert!((r - (1.0f64 + 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scaled_and_padded() {
        let b = AxisBox::new(vec![0.0, 0.0], vec![2.0, 2.0]);
        let s = b.scaled(2.0);
        assert_eq!(s.lo(), &[-1.0, -1.0]);
        assert_eq!(s.hi(), &[3.0, 3.0]);
        let p = b.padded(0.5);
        assert_eq!(p.lo(), &[-0.5, -0.5]);
    }

    #[test]
    fn halton_low_discrepancy() {
        // First few base-2 values are the usual van der Corput sequence.
        assert_eq!(halton(1, 2), 0.5);
        assert_eq!(halton(2, 2), 0.25);
        assert_eq!(halton(3, 2), 0.75);
        assert_eq!(halton(1, 3), 1.0 / 3.0);
        let b = AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        for i in 0..100 {
            let p = b.halton_point(i);
            assert!(p.iter().all(|v| *v > 0.0 && *v < 1.0));
        }
    }
}
