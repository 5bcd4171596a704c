//! Topology of level sets and fibers.
//!
//! Planar case: two independent views of the components of {f = c} inside
//! a box. A marching-squares pass over a value grid with 4-connected flood
//! fill (8-connectivity would fuse distinct branches that merely share a
//! saddle corner), and an identification pass that traces the Hamiltonian
//! field of f from seed points and merges seeds reached by the same curve.
//! Where f is a submersion on the box the two agree; near singular levels
//! the curve view is the trustworthy one.
//!
//! Higher dimensions: the fiber over (c_j)_{j != i} is the joint level set
//! of all map components except the i-th, a curve tangent to the i-th
//! cofactor field. Points are pinned by damped Newton from random starts
//! and connected by tracing that field.

use crate::expr::{Expr, EvalError};
use crate::flow::{trace_both, Termination, TraceError, TraceOptions, TracedCurve};
use crate::geom::AxisBox;
use crate::jacobian::{hamiltonian_field, JacobianBundle};
use crate::map::SmoothMap;
use crate::numeric::{dist, point_segment_dist, solve_dense};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::VecDeque;

/// Node values of a scalar on a uniform (res+1) x (res+1) grid.
/// Built once and reused across levels.
#[derive(Debug, Clone)]
pub struct Grid2d {
    bounds: AxisBox,
    res: usize,
    values: Vec<f64>,
}

impl Grid2d {
    /// `res` is the cell count per axis; fewer than 16 cells cannot resolve
    /// anything and is rejected.
    pub fn build(f: &Expr, bounds: &AxisBox, res: usize) -> Result<Self, EvalError> {
        assert_eq!(bounds.dim(), 2, "grids are planar");
        assert!(res >= 16, "resolution below 16");
        let mut values = Vec::with_capacity((res + 1) * (res + 1));
        for iy in 0..=res {
            for ix in 0..=res {
                let p = Self::node_at(bounds, res, ix, iy);
                values.push(f.eval(&p)?);
            }
        }
        Ok(Grid2d {
            bounds: bounds.clone(),
            res,
            values,
        })
    }

    fn node_at(bounds: &AxisBox, res: usize, ix: usize, iy: usize) -> Vec<f64> {
        let fx = ix as f64 / res as f64;
        let fy = iy as f64 / res as f64;
        vec![
            bounds.lo()[0] + fx * (bounds.hi()[0] - bounds.lo()[0]),
            bounds.lo()[1] + fy * (bounds.hi()[1] - bounds.lo()[1]),
        ]
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn bounds(&self) -> &AxisBox {
        &self.bounds
    }

    pub fn node(&self, ix: usize, iy: usize) -> Vec<f64> {
        Self::node_at(&self.bounds, self.res, ix, iy)
    }

    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * (self.res + 1) + ix]
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.bounds.hi()[0] - self.bounds.lo()[0]) / self.res as f64,
            (self.bounds.hi()[1] - self.bounds.lo()[1]) / self.res as f64,
        )
    }

    fn cell_crosses(&self, level: f64, cx: usize, cy: usize) -> bool {
        let vs = [
            self.value(cx, cy),
            self.value(cx + 1, cy),
            self.value(cx, cy + 1),
            self.value(cx + 1, cy + 1),
        ];
        let mn = vs.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = vs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mn <= level && level <= mx
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelComponents {
    pub level: f64,
    pub resolution: usize,
    pub count: usize,
    pub cells_per_component: Vec<usize>,
    /// Set when some component occupies fewer than 3 cells: at that size the
    /// component count is not trustworthy and the grid should be refined.
    pub coarse_flag: bool,
    #[serde(skip)]
    pub representatives: Vec<Vec<f64>>,
    #[serde(skip)]
    pub component_cells: Vec<Vec<(usize, usize)>>,
}

/// Marching-squares components of {f = level} with 4-connected merging.
pub fn level_components(grid: &Grid2d, level: f64) -> LevelComponents {
    let res = grid.res;
    let mut seen = vec![false; res * res];
    let mut component_cells: Vec<Vec<(usize, usize)>> = Vec::new();
    for cy in 0..res {
        for cx in 0..res {
            if seen[cy * res + cx] || !grid.cell_crosses(level, cx, cy) {
                continue;
            }
            let mut cells = Vec::new();
            let mut queue = VecDeque::new();
            seen[cy * res + cx] = true;
            queue.push_back((cx, cy));
            while let Some((x, y)) = queue.pop_front() {
                cells.push((x, y));
                let mut push = |nx: usize, ny: usize, seen: &mut Vec<bool>| {
                    if !seen[ny * res + nx] && grid.cell_crosses(level, nx, ny) {
                        seen[ny * res + nx] = true;
                        queue.push_back((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y, &mut seen);
                }
                if x + 1 < res {
                    push(x + 1, y, &mut seen);
                }
                if y > 0 {
                    push(x, y - 1, &mut seen);
                }
                if y + 1 < res {
                    push(x, y + 1, &mut seen);
                }
            }
            component_cells.push(cells);
        }
    }
    let representatives = component_cells
        .iter()
        .map(|cells| representative_point(grid, level, cells))
        .collect();
    let cells_per_component: Vec<usize> = component_cells.iter().map(|c| c.len()).collect();
    LevelComponents {
        level,
        resolution: res,
        count: component_cells.len(),
        coarse_flag: cells_per_component.iter().any(|c| *c < 3),
        cells_per_component,
        representatives,
        component_cells,
    }
}

fn representative_point(grid: &Grid2d, level: f64, cells: &[(usize, usize)]) -> Vec<f64> {
    for &(cx, cy) in cells {
        let corners = [
            (cx, cy),
            (cx + 1, cy),
            (cx + 1, cy + 1),
            (cx, cy + 1),
            (cx, cy),
        ];
        for w in corners.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (va, vb) = (grid.value(a.0, a.1), grid.value(b.0, b.1));
            if (va - level) * (vb - level) <= 0.0 && va != vb {
                let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
                let pa = grid.node(a.0, a.1);
                let pb = grid.node(b.0, b.1);
                return vec![pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])];
            }
        }
    }
    // flat patch: fall back to the first cell center
    let (cx, cy) = cells[0];
    let p0 = grid.node(cx, cy);
    let p1 = grid.node(cx + 1, cy + 1);
    vec![0.5 * (p0[0] + p1[0]), 0.5 * (p0[1] + p1[1])]
}

/// Points where grid edges cross the level, thinned to at most `max_seeds`.
pub fn level_seeds(grid: &Grid2d, level: f64, max_seeds: usize) -> Vec<Vec<f64>> {
    let res = grid.res;
    let mut seeds = Vec::new();
    // nodes sitting exactly on the level (common when the set follows a
    // gridline); edge interpolation below skips these
    for iy in 0..=res {
        for ix in 0..=res {
            if grid.value(ix, iy) == level {
                seeds.push(grid.node(ix, iy));
            }
        }
    }
    let mut consider = |a: (usize, usize), b: (usize, usize)| {
        let (va, vb) = (grid.value(a.0, a.1), grid.value(b.0, b.1));
        if (va - level) * (vb - level) < 0.0 {
            let t = (level - va) / (vb - va);
            let pa = grid.node(a.0, a.1);
            let pb = grid.node(b.0, b.1);
            seeds.push(vec![
                pa[0] + t * (pb[0] - pa[0]),
                pa[1] + t * (pb[1] - pa[1]),
            ]);
        }
    };
    for iy in 0..=res {
        for ix in 0..res {
            consider((ix, iy), (ix + 1, iy));
        }
    }
    for ix in 0..=res {
        for iy in 0..res {
            consider((ix, iy), (ix, iy + 1));
        }
    }
    if seeds.len() > max_seeds {
        let stride = seeds.len().div_ceil(max_seeds);
        seeds = seeds.into_iter().step_by(stride).collect();
    }
    seeds
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveIdentification {
    pub level: f64,
    pub count: usize,
    pub seed_count: usize,
    pub merge_tolerance: f64,
    /// Seeds whose trace failed (singular point of the level set).
    pub singular_seeds: usize,
    #[serde(skip)]
    pub curves: Vec<TracedCurve>,
    #[serde(skip)]
    pub representatives: Vec<Vec<f64>>,
}

/// Trace the Hamiltonian field of f through level-set seeds and count the
/// clusters the curves connect. The merge tolerance is two cell diagonals.
pub fn fiber_components_by_curves(
    f: &Expr,
    grid: &Grid2d,
    level: f64,
    max_seeds: usize,
) -> CurveIdentification {
    let seeds = level_seeds(grid, level, max_seeds);
    let (dx, dy) = grid.cell_size();
    let eps = 2.0 * (dx * dx + dy * dy).sqrt();
    let h = hamiltonian_field(f);
    let field = vec![h[0].clone(), h[1].clone()];

    let mut opts = TraceOptions::new(grid.bounds().clone());
    opts.max_step = dx.min(dy).max(1e-6);
    opts.max_arclength = 20.0 * grid.bounds().diameter();

    let mut assigned: Vec<Option<usize>> = vec![None; seeds.len()];
    let mut curves = Vec::new();
    let mut representatives = Vec::new();
    let mut singular = 0usize;
    let mut next = 0usize;
    for s in 0..seeds.len() {
        if assigned[s].is_some() {
            continue;
        }
        match trace_both(&field, &seeds[s], &opts) {
            Ok(curve) => {
                assigned[s] = Some(next);
                for o in s + 1..seeds.len() {
                    if assigned[o].is_some() {
                        continue;
                    }
                    let near = curve
                        .points
                        .iter()
                        .any(|p| dist(p, &seeds[o]) < eps);
                    if near {
                        assigned[o] = Some(next);
                    }
                }
                representatives.push(seeds[s].clone());
                curves.push(curve);
                next += 1;
            }
            Err(TraceError::ZeroField { .. }) => {
                // singular seed: the level set is not a manifold here
                assigned[s] = Some(usize::MAX);
                singular += 1;
            }
            Err(_) => {
                assigned[s] = Some(usize::MAX);
                singular += 1;
            }
        }
    }
    CurveIdentification {
        level,
        count: next,
        seed_count: seeds.len(),
        merge_tolerance: eps,
        singular_seeds: singular,
        curves,
        representatives,
    }
}

/// Scan a list of levels and return the first with at least `want`
/// grid components.
pub fn disconnected_level_scan(
    f: &Expr,
    bounds: &AxisBox,
    levels: &[f64],
    res: usize,
    want: usize,
) -> Result<Option<(f64, LevelComponents)>, EvalError> {
    let grid = Grid2d::build(f, bounds, res)?;
    for &c in levels {
        let lc = level_components(&grid, c);
        if lc.count >= want {
            return Ok(Some((c, lc)));
        }
    }
    Ok(None)
}

/// The fiber over c: every map component except the i-th pinned to a value.
#[derive(Debug, Clone, Serialize)]
pub struct FiberSpec {
    pub map: String,
    /// Distinguished component index, 1-based.
    pub index: usize,
    /// Values c_j for j != i, in ascending j.
    pub values: Vec<f64>,
    pub bounds: AxisBox,
    pub resolution: usize,
}

impl FiberSpec {
    pub fn new(
        map: impl Into<String>,
        index: usize,
        values: Vec<f64>,
        bounds: AxisBox,
        resolution: usize,
    ) -> Self {
        assert!(resolution >= 16, "resolution below 16 resolves nothing");
        assert!(values.iter().all(|v| v.is_finite()));
        assert_eq!(values.len() + 1, bounds.dim());
        assert!(index >= 1 && index <= bounds.dim());
        FiberSpec {
            map: map.into(),
            index,
            values,
            bounds,
            resolution,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FiberMethod {
    #[serde(rename = "GRID2D")]
    Grid2d,
    #[serde(rename = "CURVE_ID")]
    CurveId,
}

/// Connectivity verdict for one fiber, valid only inside the spec's box.
#[derive(Debug, Clone, Serialize)]
pub struct FiberReport {
    pub spec: FiberSpec,
    pub count: usize,
    pub representatives: Vec<Vec<f64>>,
    pub method: FiberMethod,
    /// Components may merge outside the box; every verdict is truncated.
    pub truncation_caveat: bool,
    /// Fibers are unbounded when nonempty, so a curve that exhausts its
    /// budget in both directions without leaving the box is suspect.
    pub loop_anomalies: usize,
    pub roots_found: usize,
    pub singular_roots: usize,
    #[serde(skip)]
    pub curves: Vec<TracedCurve>,
}

const FIBER_NEWTON_TOL: f64 = 1e-10;
const FIBER_NEWTON_ITERS: usize = 60;

/// One damped Newton run on the fiber equations augmented with a random
/// affine slice. Returns a point with every fiber residual below tol.
fn fiber_newton(
    constraints: &[(Vec<Expr>, f64)],
    slice_normal: &[f64],
    slice_offset: f64,
    start: &[f64],
    bounds: &AxisBox,
) -> Option<Vec<f64>> {
    let n = start.len();
    let residual = |x: &[f64]| -> Option<Vec<f64>> {
        let mut r = Vec::with_capacity(n);
        for (grad_and_f, c) in constraints {
            // first entry is f itself, the rest its gradient
            r.push(grad_and_f[0].eval(x).ok()? - c);
        }
        let dot: f64 = slice_normal.iter().zip(x).map(|(a, b)| a * b).sum();
        r.push(dot - slice_offset);
        Some(r)
    };
    let norm2 = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();

    let mut x = start.to_vec();
    let mut r = residual(&x)?;
    for _ in 0..FIBER_NEWTON_ITERS {
        let fiber_resid = r[..n - 1]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if fiber_resid <= FIBER_NEWTON_TOL && r[n - 1].abs() <= 1e-8 {
            return bounds.contains_slack(&x, 1e-9 * (1.0 + bounds.diameter())).then_some(x);
        }
        let mut jac = Vec::with_capacity(n);
        for (grad_and_f, _) in constraints {
            let mut row = Vec::with_capacity(n);
            for g in &grad_and_f[1..] {
                row.push(g.eval(&x).ok()?);
            }
            jac.push(row);
        }
        jac.push(slice_normal.to_vec());
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        let delta = solve_dense(jac, rhs)?;
        let r_norm = norm2(&r);
        let mut lambda = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
            if let Some(tr) = residual(&trial) {
                if norm2(&tr) < r_norm || lambda < 1e-4 {
                    x = trial;
                    r = tr;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return None;
            }
        }
    }
    None
}

/// Count the connected components of the fiber inside the box by Newton
/// multistart and cofactor-field tracing. Count 0 means no fiber point was
/// located, which includes the genuinely empty fiber.
pub fn fiber_components(
    map: &SmoothMap,
    spec: &FiberSpec,
    n_starts: usize,
    seed: u64,
) -> Result<FiberReport, EvalError> {
    let n = map.dim();
    assert!(n >= 2);
    assert_eq!(spec.bounds.dim(), n);
    let bundle = JacobianBundle::new(map);

    // each constraint carries [f_j, grad f_j...] so Newton shares evals
    let mut constraints: Vec<(Vec<Expr>, f64)> = Vec::with_capacity(n - 1);
    let mut vi = 0usize;
    for j in 1..=n {
        if j == spec.index {
            continue;
        }
        let mut pack = vec![map.component(j).clone()];
        for k in 1..=n {
            pack.push(map.component(j).diff(k));
        }
        constraints.push((pack, spec.values[vi]));
        vi += 1;
    }

    let eps = 1e-3 * spec.bounds.diameter();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roots: Vec<Vec<f64>> = Vec::new();
    for _ in 0..n_starts {
        let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let start = spec.bounds.sample(&u);
        let mut normal: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if len < 1e-3 {
            continue;
        }
        for v in &mut normal {
            *v /= len;
        }
        let offset: f64 = normal.iter().zip(&start).map(|(a, b)| a * b).sum();
        if let Some(root) = fiber_newton(&constraints, &normal, offset, &start, &spec.bounds) {
            if roots.iter().all(|r| dist(r, &root) > eps) {
                roots.push(root);
            }
        }
    }

    let field = bundle.cofactor_field(spec.index);
    let mut opts = TraceOptions::new(spec.bounds.clone());
    opts.max_arclength = 20.0 * spec.bounds.diameter();

    let mut assigned: Vec<Option<usize>> = vec![None; roots.len()];
    let mut curves = Vec::new();
    let mut representatives = Vec::new();
    let mut singular = 0usize;
    let mut anomalies = 0usize;
    let mut next = 0usize;
    for s in 0..roots.len() {
        if assigned[s].is_some() {
            continue;
        }
        match trace_both(&field, &roots[s], &opts) {
            Ok(curve) => {
                assigned[s] = Some(next);
                for o in s + 1..roots.len() {
                    if assigned[o].is_some() {
                        continue;
                    }
                    // distance to the polyline, not its vertices: steps can
                    // be long wherever the field runs straight
                    let near = curve
                        .points
                        .windows(2)
                        .any(|w| point_segment_dist(&roots[o], &w[0], &w[1]) < eps)
                        || curve.points.iter().any(|p| dist(p, &roots[o]) < eps);
                    if near {
                        assigned[o] = Some(next);
                    }
                }
                let boxed_in = curve.backward_termination == Termination::Budget
                    && curve.forward_termination == Termination::Budget;
                if boxed_in || curve.loop_suspect {
                    anomalies += 1;
                }
                representatives.push(roots[s].clone());
                curves.push(curve);
                next += 1;
            }
            Err(TraceError::ZeroField { .. }) => {
                assigned[s] = Some(usize::MAX);
                singular += 1;
            }
            Err(_) => {
                assigned[s] = Some(usize::MAX);
                singular += 1;
            }
        }
    }

    Ok(FiberReport {
        spec: spec.clone(),
        count: next,
        representatives,
        method: FiberMethod::CurveId,
        truncation_caveat: true,
        loop_anomalies: anomalies,
        roots_found: roots.len(),
        singular_roots: singular,
        curves,
    })
}

/// Sample fiber values from the image of random box points and return the
/// first fiber that splits into two or more components. The values come
/// from actual images, so every candidate fiber is nonempty. None is a
/// budget exhaustion, not a connectedness proof.
pub fn find_disconnected_fiber(
    map: &SmoothMap,
    index: usize,
    budget: usize,
    n_starts: usize,
    seed: u64,
) -> Result<Option<FiberReport>, EvalError> {
    assert!(budget >= 1);
    let n = map.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..budget {
        let u: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let x = map.domain().sample(&u);
        let image = match map.eval(&x) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let values: Vec<f64> = (1..=n)
            .filter(|j| *j != index)
            .map(|j| image[j - 1])
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let spec = FiberSpec::new(map.name(), index, values, map.domain().clone(), 16);
        let sub_seed = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let report = fiber_components(map, &spec, n_starts, sub_seed)?;
        if report.count >= 2 {
            return Ok(Some(report));
        }
    }
    Ok(None)
}

/// Smallest gradient norm of f over Halton probes in the box. A small
/// return value marks a level-set analysis as untrustworthy: the grid view
/// may glue branches through near-critical points.
pub fn submersion_floor(f: &Expr, bounds: &AxisBox, probes: usize) -> f64 {
    let grads: Vec<Expr> = (1..=bounds.dim()).map(|k| f.diff(k)).collect();
    let mut floor = f64::INFINITY;
    for i in 0..probes {
        let p = bounds.halton_point(i);
        let mut s = 0.0;
        let mut ok = true;
        for g in &grads {
            match g.eval(&p) {
                Ok(v) => s += v * v,
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            floor = floor.min(s.sqrt());
        }
    }
    floor
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::flow::Termination;

    fn square(r: f64) -> AxisBox {
        AxisBox::new(vec![-r, -r], vec![r, r])
    }

    #[test]
    fn circle_has_one_component() {
        let f = parse("x1^2 + x2^2").unwrap();
        let grid = Grid2d::build(&f, &square(2.0), 64).unwrap();
        let lc = level_components(&grid, 1.0);
        assert_eq!(lc.count, 1);
        assert!(!lc.coarse_flag);
        let empty = level_components(&grid, -1.0);
        assert_eq!(empty.count, 0);
    }

    #[test]
    fn two_circles_give_two_components() {
        let f = parse("((x1 - 1)^2 + x2^2 - 1/4)*((x1 + 1)^2 + x2^2 - 1/4)").unwrap();
        let grid = Grid2d::build(&f, &square(2.0), 128).unwrap();
        let lc = level_components(&grid, 0.0);
        assert_eq!(lc.count, 2);
        // representatives really sit on the level set
        for r in &lc.representatives {
            assert!(f.eval(r).unwrap().abs() < 0.05);
        }
    }

    #[test]
    fn hyperbola_grid_and_curves_agree() {
        let f = parse("x1*x2").unwrap();
        let grid = Grid2d::build(&f, &square(2.0), 128).unwrap();
        let lc = level_components(&grid, 1.0);
        assert_eq!(lc.count, 2);
        let ci = fiber_components_by_curves(&f, &grid, 1.0, 48);
        assert_eq!(ci.count, 2);
        assert_eq!(ci.singular_seeds, 0);
    }

    #[test]
    fn singular_cross_splits_under_curves() {
        // {x1 x2 = 0} is grid-connected through the origin but the curve
        // view keeps the four arms apart (the origin is a zero of the
        // Hamiltonian field).
        let f = parse("x1*x2").unwrap();
        let grid = Grid2d::build(&f, &square(2.0), 64).unwrap();
        let lc = level_components(&grid, 0.0);
        assert_eq!(lc.count, 1);
        let ci = fiber_components_by_curves(&f, &grid, 0.0, 32);
        assert!(ci.count >= 2, "{ci:?}");
        // the field zero at the origin shows up as a stalled trace
        let stalled = ci.curves.iter().any(|c| {
            matches!(c.backward_termination, Termination::StepUnderflow)
                || matches!(c.forward_termination, Termination::StepUnderflow)
        });
        assert!(stalled || ci.singular_seeds > 0);
    }

    #[test]
    fn seeds_lie_on_level() {
        let f = parse("x1^2 + x2^2").unwrap();
        let grid = Grid2d::build(&f, &square(2.0), 64).unwrap();
        for s in level_seeds(&grid, 1.0, 40) {
            assert!((f.eval(&s).unwrap() - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn disconnection_scan() {
        let f = parse("x1*(1 - x1*x2^2)").unwrap();
        let b = square(2.0);
        let hit = disconnected_level_scan(&f, &b, &[0.5, 0.0], 128, 2)
            .unwrap()
            .unwrap();
        assert_eq!(hit.0, 0.0);
        assert!(hit.1.count >= 3);
    }

    fn spiral3() -> SmoothMap {
        SmoothMap::new(
            "spiral3",
            vec![
                parse("exp(x1)*cos(x2)").unwrap(),
                parse("exp(x1)*sin(x2)").unwrap(),
                parse("x3").unwrap(),
            ],
            AxisBox::new(vec![-2.0, -7.0, -2.0], vec![2.0, 7.0, 2.0]),
        )
        .unwrap()
    }

    #[test]
    fn spiral_fiber_is_three_lines() {
        let m = spiral3();
        let spec = FiberSpec::new(
            "spiral3",
            3,
            vec![1.0, 0.0],
            m.domain().clone(),
            16,
        );
        let rep = fiber_components(&m, &spec, 200, 7).unwrap();
        assert_eq!(rep.count, 3, "roots {:?}", rep.representatives);
        let tau = std::f64::consts::TAU;
        let mut hit = [false; 3];
        for r in &rep.representatives {
            assert!(r[0].abs() < 1e-8);
            for (slot, target) in [-tau, 0.0, tau].iter().enumerate() {
                if (r[1] - target).abs() < 1e-6 {
                    hit[slot] = true;
                }
            }
        }
        assert!(hit.iter().all(|h| *h), "{:?}", rep.representatives);
        assert_eq!(rep.loop_anomalies, 0);
    }

    #[test]
    fn fiber_representatives_are_refined() {
        let m = spiral3();
        let spec = FiberSpec::new("spiral3", 3, vec![1.0, 0.0], m.domain().clone(), 16);
        let rep = fiber_components(&m, &spec, 100, 3).unwrap();
        for r in &rep.representatives {
            let img = m.eval(r).unwrap();
            assert!((img[0] - 1.0).abs() <= 1e-9);
            assert!(img[1].abs() <= 1e-9);
        }
    }

    #[test]
    fn identity3_fiber_is_connected() {
        let m = SmoothMap::new(
            "identity3",
            vec![
                parse("x1").unwrap(),
                parse("x2").unwrap(),
                parse("x3").unwrap(),
            ],
            AxisBox::new(vec![-2.0; 3], vec![2.0; 3]),
        )
        .unwrap();
        let spec = FiberSpec::new("identity3", 1, vec![0.3, -0.2], m.domain().clone(), 16);
        let rep = fiber_components(&m, &spec, 60, 11).unwrap();
        assert_eq!(rep.count, 1);
        assert!(rep.truncation_caveat);
    }

    #[test]
    fn spiral_branch_fiber_depends_on_window() {
        // the fiber over (c2, c3) = (1, 0) is x1 = -log sin x2 on every
        // interval where sin x2 > 0; a window holding one such interval
        // sees one component, the symmetric window holds three
        let comps = vec![
            parse("exp(x1)*cos(x2)").unwrap(),
            parse("exp(x1)*sin(x2)").unwrap(),
            parse("x3").unwrap(),
        ];
        let narrow = SmoothMap::new(
            "spiral3",
            comps.clone(),
            AxisBox::new(vec![-8.0, -0.5, -2.0], vec![8.0, 3.5, 2.0]),
        )
        .unwrap();
        let spec = FiberSpec::new("spiral3", 1, vec![1.0, 0.0], narrow.domain().clone(), 16);
        let rep = fiber_components(&narrow, &spec, 200, 5).unwrap();
        assert_eq!(rep.count, 1, "roots {:?}", rep.representatives);

        let wide = SmoothMap::new(
            "spiral3",
            comps,
            AxisBox::new(vec![-8.0; 3], vec![8.0; 3]),
        )
        .unwrap();
        let spec = FiberSpec::new("spiral3", 1, vec![1.0, 0.0], wide.domain().clone(), 16);
        let rep = fiber_components(&wide, &spec, 400, 5).unwrap();
        assert_eq!(rep.count, 3, "roots {:?}", rep.representatives);
    }

    #[test]
    fn disconnected_fiber_search_finds_spiral_witness() {
        let m = spiral3();
        let hit = find_disconnected_fiber(&m, 3, 200, 120, 2026)
            .unwrap()
            .expect("spiral fibers disconnect");
        assert!(hit.count >= 2);
        assert_eq!(hit.spec.index, 3);
        assert!(hit.representatives.len() >= 2);
    }

    #[test]
    fn identity_fiber_search_reports_none() {
        let m = SmoothMap::new(
            "identity2",
            vec![parse("x1").unwrap(), parse("x2").unwrap()],
            AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
        )
        .unwrap();
        assert!(find_disconnected_fiber(&m, 1, 10, 40, 9).unwrap().is_none());
    }
}
