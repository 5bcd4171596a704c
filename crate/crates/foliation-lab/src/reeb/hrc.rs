//! Half-Reeb structure of a planar foliation.
//!
//! The model is the level foliation of x1*x2 near the first quadrant: an
//! edge segment from (0,1) to (1,0) meets every nearby leaf twice, except
//! the single leaf tangent to it at (1/2, 1/2), while the two boundary
//! leaves through the edge endpoints run off to infinity. `construct_hrc`
//! certifies that a candidate edge between two given points carries this
//! structure for the level foliation of an arbitrary scalar, and
//! `detect_hrc_2d` hunts for such an edge starting from disconnected level
//! sets on a grid.
//!
//! The double-crossing test is traced, not assumed: each fan leaf is
//! integrated from a point just inside the edge until it crosses the edge
//! again. Leaves may wander far before returning, so a failed trace
//! enlarges the box and retries before giving up.

use crate::expr::{EvalError, Expr};
use crate::fiber::{level_components, Grid2d, LevelComponents};
use crate::flow::{trace_both, Termination, TraceError, TraceOptions, TracedCurve};
use crate::geom::AxisBox;
use crate::jacobian::hamiltonian_field;
use crate::numeric::{dist, norm, point_segment_dist};
use serde::Serialize;

pub const ENDPOINT_LEVEL_TOL: f64 = 1e-6;
pub const TANGENCY_TOL: f64 = 1e-6;
pub const REP_REFINE_TOL: f64 = 1e-9;
pub const SAME_LEAF_FACTOR: f64 = 1e-3;
pub const SEED_OFFSET: f64 = 1e-6;
pub const MAX_EXPANSIONS: usize = 4;
pub const BISECT_ITERS: usize = 60;
pub const FAN_SIZE: usize = 8;
/// Away from the tangency the leaves must cut the edge at an angle whose
/// sine is at least this fraction.
pub const TRANSVERSALITY_MARGIN: f64 = 0.05;
/// Parameter half-width of the tangency neighborhood exempt from the
/// transversality requirement.
pub const TRANSVERSALITY_WINDOW: f64 = 0.1;
pub const SUBMERSION_MIN_GRAD: f64 = 1e-8;
pub const SUITE_LEVEL_TOL: f64 = 1e-9;
pub const SUITE_RESOLUTION: usize = 512;

#[derive(Debug, Clone, Serialize)]
pub struct FanLeaf {
    pub level: f64,
    pub t_enter: f64,
    pub t_exit: f64,
    /// Edge crossings of the traced leaf, launch point included.
    pub crossing_count: usize,
    pub max_edge_distance: f64,
    pub expansions: usize,
    #[serde(skip)]
    pub curve: TracedCurve,
}

#[derive(Debug, Clone, Serialize)]
pub struct SideReport {
    pub endpoint: Vec<f64>,
    pub escaped: bool,
    pub reach: f64,
    /// Crossings of the edge away from the side's own endpoint; zero on
    /// any certified component.
    pub recrossings: usize,
}

/// A certified half-Reeb edge: level foliation data around the segment
/// [p, q], tangency at w, double-crossing fan, and unbounded sides.
#[derive(Debug, Clone, Serialize)]
pub struct Hrc2d {
    pub level: f64,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    pub t_w: f64,
    pub tangent_level: f64,
    /// Smallest normalized |<grad f, edge>| outside the tangency window.
    pub transversality_margin: f64,
    pub fan: Vec<FanLeaf>,
    pub sides: [SideReport; 2],
    pub trace_box: AxisBox,
}

#[derive(Debug, Clone)]
pub enum HrcReject {
    LevelMismatch { fp: f64, fq: f64 },
    EndpointTangent,
    NoInteriorTangency,
    MultipleTangencies { count: usize },
    WeakTransversality { t: f64, margin: f64 },
    SameLeaf,
    CompactSide { endpoint: Vec<f64> },
    SideRecross { endpoint: Vec<f64> },
    NoReturnCrossing { level: f64 },
    ExtraCrossings { level: f64, count: usize },
    Eval(String),
}

impl std::fmt::Display for HrcReject {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HrcReject::LevelMismatch { fp, fq } => {
                write!(f, "edge endpoints sit on different levels ({fp} vs {fq})")
            }
            HrcReject::EndpointTangent => write!(f, "foliation tangent at an edge endpoint"),
            HrcReject::NoInteriorTangency => write!(f, "no interior tangency along the edge"),
            HrcReject::MultipleTangencies { count } => {
                write!(f, "edge meets the foliation tangentially {count} times")
            }
            HrcReject::WeakTransversality { t, margin } => {
                write!(
                    f,
                    "leaves nearly parallel to the edge at t={t} (margin {margin:.2e})"
                )
            }
            HrcReject::SameLeaf => write!(f, "edge endpoints lie on the same leaf"),
            HrcReject::CompactSide { endpoint } => {
                write!(f, "boundary leaf through {endpoint:?} does not escape")
            }
            HrcReject::SideRecross { endpoint } => {
                write!(f, "boundary leaf through {endpoint:?} recrosses the edge")
            }
            HrcReject::NoReturnCrossing { level } => {
                write!(f, "fan leaf at level {level} never recrosses the edge")
            }
            HrcReject::ExtraCrossings { level, count } => {
                write!(f, "fan leaf at level {level} crosses the edge {count} times")
            }
            HrcReject::Eval(m) => write!(f, "evaluation failed: {m}"),
        }
    }
}

impl std::error::Error for HrcReject {}

/// Scan failure distinct from "nothing found": the scanned scalar must be a
/// submersion for level components to mirror leaves.
#[derive(Debug)]
pub enum DetectError {
    SubmersionViolation { point: Vec<f64>, grad_norm: f64 },
    Eval(EvalError),
}

impl std::fmt::Display for DetectError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectError::SubmersionViolation { point, grad_norm } => write!(
                f,
                "gradient norm {grad_norm:.2e} below {SUBMERSION_MIN_GRAD:.0e} at {point:?}"
            ),
            DetectError::Eval(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DetectError {}

impl From<EvalError> for DetectError {
    fn from(e: EvalError) -> Self {
        DetectError::Eval(e)
    }
}

fn seg_point(p: &[f64], q: &[f64], t: f64) -> Vec<f64> {
    vec![p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection of segments [a,b] and [p,q]; returns (s on ab, t on pq).
fn segment_crossing(a: &[f64], b: &[f64], p: &[f64], q: &[f64]) -> Option<(f64, f64)> {
    let r = [b[0] - a[0], b[1] - a[1]];
    let d = [q[0] - p[0], q[1] - p[1]];
    let denom = r[0] * d[1] - r[1] * d[0];
    if denom.abs() < 1e-300 {
        return None;
    }
    let ap = [p[0] - a[0], p[1] - a[1]];
    let s = (ap[0] * d[1] - ap[1] * d[0]) / denom;
    let t = (ap[0] * r[1] - ap[1] * r[0]) / denom;
    let eps = 1e-12;
    if (-eps..=1.0 + eps).contains(&s) && (-eps..=1.0 + eps).contains(&t) {
        Some((s, t))
    } else {
        None
    }
}

/// Edge parameters where the curve crosses [p,q], in curve order, skipping
/// a window around the launch point.
fn edge_crossings(
    curve: &TracedCurve,
    p: &[f64],
    q: &[f64],
    skip_t: f64,
    skip_window: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for pair in curve.points.windows(2) {
        if let Some((_, t)) = segment_crossing(&pair[0], &pair[1], p, q) {
            if (t - skip_t).abs() > skip_window {
                out.push(t);
            }
        }
    }
    out
}

/// Newton step along the gradient until |f - target| is small; used to pull
/// grid representatives exactly onto their level.
pub fn refine_to_level(f: &Expr, x: &[f64], target: f64) -> Option<Vec<f64>> {
    let gx = f.diff(1);
    let gy = f.diff(2);
    let mut p = x.to_vec();
    for _ in 0..50 {
        let v = f.eval(&p).ok()?;
        if (v - target).abs() <= REP_REFINE_TOL * (1.0 + target.abs()) {
            return Some(p);
        }
        let g = [gx.eval(&p).ok()?, gy.eval(&p).ok()?];
        let g2 = g[0] * g[0] + g[1] * g[1];
        if g2 < 1e-24 {
            return None;
        }
        let step = (v - target) / g2;
        p[0] -= step * g[0];
        p[1] -= step * g[1];
    }
    None
}

struct EdgeProfile {
    level: f64,
    t_w: f64,
    tangent_level: f64,
    transversality_margin: f64,
}

/// Locate the single interior tangency of the foliation along the edge and
/// certify transversality everywhere else.
fn edge_profile(f: &Expr, p: &[f64], q: &[f64]) -> Result<EdgeProfile, HrcReject> {
    let fp = f
        .eval(p)
        .map_err(|e| HrcReject::Eval(format!("f(p): {e}")))?;
    let fq = f
        .eval(q)
        .map_err(|e| HrcReject::Eval(format!("f(q): {e}")))?;
    if (fp - fq).abs() > ENDPOINT_LEVEL_TOL * (1.0 + fp.abs()) {
        return Err(HrcReject::LevelMismatch { fp, fq });
    }
    let level = 0.5 * (fp + fq);

    let gx = f.diff(1);
    let gy = f.diff(2);
    let d = [q[0] - p[0], q[1] - p[1]];
    let d_len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let grad = |t: f64| -> Result<[f64; 2], HrcReject> {
        let x = seg_point(p, q, t);
        let a = gx
            .eval(&x)
            .map_err(|e| HrcReject::Eval(format!("grad: {e}")))?;
        let b = gy
            .eval(&x)
            .map_err(|e| HrcReject::Eval(format!("grad: {e}")))?;
        Ok([a, b])
    };
    let psi = |t: f64| -> Result<f64, HrcReject> {
        let g = grad(t)?;
        Ok(g[0] * d[0] + g[1] * d[1])
    };

    let samples = 400usize;
    let mut values = Vec::with_capacity(samples + 1);
    let mut grad_norms = Vec::with_capacity(samples + 1);
    for i in 0..=samples {
        let g = grad(i as f64 / samples as f64)?;
        values.push(g[0] * d[0] + g[1] * d[1]);
        grad_norms.push((g[0] * g[0] + g[1] * g[1]).sqrt());
    }
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Err(HrcReject::NoInteriorTangency);
    }
    if values[0].abs() < TANGENCY_TOL * scale || values[samples].abs() < TANGENCY_TOL * scale {
        return Err(HrcReject::EndpointTangent);
    }
    // sign transitions over the sample sequence
    let mut change_intervals = Vec::new();
    let mut last_sign = values[0].signum();
    let mut last_index = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v == 0.0 {
            continue;
        }
        let s = v.signum();
        if s != last_sign {
            change_intervals.push((last_index, i));
            last_sign = s;
        }
        last_index = i;
    }
    match change_intervals.len() {
        0 => return Err(HrcReject::NoInteriorTangency),
        1 => {}
        n => return Err(HrcReject::MultipleTangencies { count: n }),
    }
    let (i0, i1) = change_intervals[0];
    let mut lo = i0 as f64 / samples as f64;
    let mut hi = i1 as f64 / samples as f64;
    let mut v_lo = values[i0];
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        let v_mid = psi(mid)?;
        if v_mid == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if (v_mid > 0.0) == (v_lo > 0.0) {
            lo = mid;
            v_lo = v_mid;
        } else {
            hi = mid;
        }
    }
    let t_w = 0.5 * (lo + hi);
    let w = seg_point(p, q, t_w);
    let tangent_level = f
        .eval(&w)
        .map_err(|e| HrcReject::Eval(format!("f(w): {e}")))?;

    let mut margin = f64::INFINITY;
    let mut margin_t = t_w;
    for (i, (v, gn)) in values.iter().zip(&grad_norms).enumerate() {
        let t = i as f64 / samples as f64;
        if (t - t_w).abs() <= TRANSVERSALITY_WINDOW {
            continue;
        }
        let m = if *gn > 0.0 {
            v.abs() / (gn * d_len)
        } else {
            0.0
        };
        if m < margin {
            margin = m;
            margin_t = t;
        }
    }
    if margin < TRANSVERSALITY_MARGIN {
        return Err(HrcReject::WeakTransversality {
            t: margin_t,
            margin,
        });
    }
    Ok(EdgeProfile {
        level,
        t_w,
        tangent_level,
        transversality_margin: margin,
    })
}

/// Root of f(seg(t)) = c on a monotone stretch [lo, hi].
fn level_root(
    f: &Expr,
    p: &[f64],
    q: &[f64],
    c: f64,
    mut lo: f64,
    mut hi: f64,
) -> Result<f64, HrcReject> {
    let phi = |t: f64| -> Result<f64, HrcReject> {
        f.eval(&seg_point(p, q, t))
            .map_err(|e| HrcReject::Eval(format!("f on edge: {e}")))
    };
    let mut v_lo = phi(lo)? - c;
    let v_hi = phi(hi)? - c;
    if v_lo == 0.0 {
        return Ok(lo);
    }
    if v_hi == 0.0 {
        return Ok(hi);
    }
    if (v_lo > 0.0) == (v_hi > 0.0) {
        return Err(HrcReject::Eval(format!(
            "fan level {c} is not bracketed on the edge"
        )));
    }
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        let v_mid = phi(mid)? - c;
        if v_mid == 0.0 {
            return Ok(mid);
        }
        if (v_mid > 0.0) == (v_lo > 0.0) {
            lo = mid;
            v_lo = v_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Certify the half-Reeb structure on the edge [p, q] for the level
/// foliation of f. `base_box` bounds the search; fan traces may expand it.
pub fn construct_hrc(
    f: &Expr,
    p: &[f64],
    q: &[f64],
    base_box: &AxisBox,
) -> Result<Hrc2d, HrcReject> {
    assert_eq!(base_box.dim(), 2);
    let profile = edge_profile(f, p, q)?;
    let field = hamiltonian_field(f);
    let field_slice: Vec<Expr> = field.to_vec();

    // non-compact sides: the boundary leaves must leave a generous box,
    // must not connect p to q, and must not cut back through the edge
    let side_box = enclose(base_box, p, q).scaled(4.0);
    let same_leaf_tol = SAME_LEAF_FACTOR * (1.0 + dist(p, q));
    let mut sides = Vec::with_capacity(2);
    for (start, other, own_t) in [(p, q, 0.0), (q, p, 1.0)] {
        let mut opts = TraceOptions::new(side_box.clone());
        opts.max_arclength = 40.0 * side_box.diameter();
        let curve = match trace_both(&field_slice, start, &opts) {
            Ok(c) => c,
            Err(TraceError::ZeroField { .. }) => {
                return Err(HrcReject::Eval(
                    "foliation is singular at an edge endpoint".into(),
                ))
            }
            Err(e) => return Err(HrcReject::Eval(format!("side trace: {e}"))),
        };
        if curve.points.iter().any(|x| dist(x, other) < same_leaf_tol) {
            return Err(HrcReject::SameLeaf);
        }
        let escaped = curve.backward_termination == Termination::LeftBox
            || curve.forward_termination == Termination::LeftBox;
        if !escaped {
            return Err(HrcReject::CompactSide {
                endpoint: start.to_vec(),
            });
        }
        let recrossings = dedup_params(edge_crossings(&curve, p, q, own_t, 1e-2)).len();
        if recrossings > 0 {
            return Err(HrcReject::SideRecross {
                endpoint: start.to_vec(),
            });
        }
        let reach = curve.points.iter().map(|x| norm(x)).fold(0.0, f64::max);
        sides.push(SideReport {
            endpoint: start.to_vec(),
            escaped,
            reach,
            recrossings,
        });
    }

    // fan of interior leaves: each must recross the edge past the tangency
    // exactly once, launch crossing aside
    let mut fan = Vec::with_capacity(FAN_SIZE);
    let mut widest_box = enclose(base_box, p, q);
    for step in 1..=FAN_SIZE {
        let frac = step as f64 / (FAN_SIZE + 1) as f64;
        let c = profile.level + frac * (profile.tangent_level - profile.level);
        let t_minus = level_root(f, p, q, c, 0.0, profile.t_w)?;
        let t_plus = level_root(f, p, q, c, profile.t_w, 1.0)?;
        let t_seed = t_minus + SEED_OFFSET * (t_plus - t_minus);
        let seed = seg_point(p, q, t_seed);
        let skip_window = 1e-3 * (t_plus - t_minus);

        let mut found = None;
        let mut expansions = 0;
        loop {
            let trace_box = enclose(base_box, p, q).scaled(2f64.powi(expansions as i32));
            let mut opts = TraceOptions::new(trace_box.clone());
            opts.max_arclength = 40.0 * trace_box.diameter();
            let curve = trace_both(&field_slice, &seed, &opts)
                .map_err(|e| HrcReject::Eval(format!("fan trace: {e}")))?;
            let crossings = dedup_params(edge_crossings(&curve, p, q, t_seed, skip_window));
            if crossings.len() > 1 {
                return Err(HrcReject::ExtraCrossings {
                    level: c,
                    count: crossings.len() + 1,
                });
            }
            if let Some(&t_exit) = crossings.first().filter(|t| **t > profile.t_w) {
                let max_edge_distance = curve
                    .points
                    .iter()
                    .step_by(4)
                    .map(|x| point_segment_dist(x, p, q))
                    .fold(0.0, f64::max);
                found = Some(FanLeaf {
                    level: c,
                    t_enter: t_seed,
                    t_exit,
                    crossing_count: crossings.len() + 1,
                    max_edge_distance,
                    expansions,
                    curve,
                });
                if trace_box.diameter() > widest_box.diameter() {
                    widest_box = trace_box;
                }
                break;
            }
            let left = curve.backward_termination == Termination::LeftBox
                || curve.forward_termination == Termination::LeftBox;
            if !left || expansions >= MAX_EXPANSIONS {
                break;
            }
            expansions += 1;
        }
        match found {
            Some(leaf) => fan.push(leaf),
            None => return Err(HrcReject::NoReturnCrossing { level: c }),
        }
    }

    let w = seg_point(p, q, profile.t_w);
    Ok(Hrc2d {
        level: profile.level,
        p: p.to_vec(),
        q: q.to_vec(),
        w,
        t_w: profile.t_w,
        tangent_level: profile.tangent_level,
        transversality_margin: profile.transversality_margin,
        fan,
        sides: [sides.remove(0), sides.remove(0)],
        trace_box: widest_box,
    })
}

/// Collapse near-identical edge parameters; the same geometric crossing can
/// register from both trace directions of a closed leaf.
fn dedup_params(mut ts: Vec<f64>) -> Vec<f64> {
    ts.sort_by(f64::total_cmp);
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    ts
}

/// Smallest padded box containing both the base box and the edge.
fn enclose(base: &AxisBox, p: &[f64], q: &[f64]) -> AxisBox {
    let lo: Vec<f64> = (0..2).map(|i| p[i].min(q[i])).collect();
    let hi: Vec<f64> = (0..2).map(|i| p[i].max(q[i])).collect();
    let edge = AxisBox::new(
        lo.iter().map(|v| v - 1e-6).collect(),
        hi.iter().map(|v| v + 1e-6).collect(),
    );
    base.hull(&edge)
}

/// Scan levels of f over a box for a certified half-Reeb edge. Levels given
/// in `preferred` are tried first, then the zero level, then a spread of
/// interior levels, at most `budget` in total; within a disconnected level
/// every pair of component representatives becomes a candidate edge.
pub fn detect_hrc_2d(
    f: &Expr,
    bounds: &AxisBox,
    resolution: usize,
    budget: usize,
    preferred: &[f64],
) -> Result<Option<Hrc2d>, DetectError> {
    let gx = f.diff(1);
    let gy = f.diff(2);
    let probes = resolution.min(64);
    for iy in 0..=probes {
        for ix in 0..=probes {
            let x = bounds.sample(&[ix as f64 / probes as f64, iy as f64 / probes as f64]);
            let g = [gx.eval(&x)?, gy.eval(&x)?];
            let gn = norm(&g);
            if gn < SUBMERSION_MIN_GRAD {
                return Err(DetectError::SubmersionViolation {
                    point: x,
                    grad_norm: gn,
                });
            }
        }
    }

    let grid = Grid2d::build(f, bounds, resolution)?;
    let mut vmin = f64::INFINITY;
    let mut vmax = f64::NEG_INFINITY;
    for iy in 0..=resolution {
        for ix in 0..=resolution {
            let v = grid.value(ix, iy);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
    }
    let mut levels: Vec<f64> = preferred.to_vec();
    if vmin < 0.0 && 0.0 < vmax && !levels.contains(&0.0) {
        levels.push(0.0);
    }
    let spread: Vec<f64> = (1..20)
        .map(|j| vmin + j as f64 * (vmax - vmin) / 20.0)
        .collect();
    let mut rest: Vec<f64> = spread
        .into_iter()
        .filter(|c| !levels.iter().any(|l| (l - c).abs() < 1e-12))
        .collect();
    rest.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    levels.extend(rest);

    for c in levels.into_iter().take(budget) {
        let lc = level_components(&grid, c);
        if lc.count < 2 {
            continue;
        }
        let reps: Vec<Vec<f64>> = lc
            .representatives
            .iter()
            .filter_map(|r| refine_to_level(f, r, c))
            .collect();
        for i in 0..reps.len() {
            for j in i + 1..reps.len() {
                if let Ok(hrc) = construct_hrc(f, &reps[i], &reps[j], bounds) {
                    return Ok(Some(hrc));
                }
            }
        }
    }
    Ok(None)
}

/// Post-construction checklist, re-deriving what the certificate claims:
/// endpoint level agreement, separation of the endpoint components on a
/// fine grid, transversality, and the crossing counts.
#[derive(Debug, Clone, Serialize)]
pub struct ValiditySuite {
    pub level_gap: f64,
    pub same_level: bool,
    pub component_count: usize,
    pub distinct_components: bool,
    pub transversality_margin: f64,
    pub transversality_pass: bool,
    pub fan_size: usize,
    pub fan_crossings_pass: bool,
    pub sides_pass: bool,
    pub pass: bool,
}

pub fn validity_suite(
    f: &Expr,
    hrc: &Hrc2d,
    bounds: &AxisBox,
) -> Result<ValiditySuite, EvalError> {
    let fp = f.eval(&hrc.p)?;
    let fq = f.eval(&hrc.q)?;
    let level_gap = (fp - fq).abs();
    let same_level = level_gap <= SUITE_LEVEL_TOL * (1.0 + hrc.level.abs());

    let grid = Grid2d::build(f, bounds, SUITE_RESOLUTION)?;
    let lc = level_components(&grid, hrc.level);
    let cp = component_index_at(&lc, &grid, &hrc.p);
    let cq = component_index_at(&lc, &grid, &hrc.q);
    let distinct_components = match (cp, cq) {
        (Some(a), Some(b)) => a != b,
        _ => false,
    };

    let transversality_pass = hrc.transversality_margin >= TRANSVERSALITY_MARGIN;
    let fan_crossings_pass = hrc.fan.len() >= FAN_SIZE
        && hrc
            .fan
            .iter()
            .all(|l| l.crossing_count == 2 && l.t_exit > hrc.t_w && l.t_enter < hrc.t_w);
    let sides_pass = hrc.sides.iter().all(|s| s.escaped && s.recrossings == 0);
    let pass = same_level
        && distinct_components
        && transversality_pass
        && fan_crossings_pass
        && sides_pass;
    Ok(ValiditySuite {
        level_gap,
        same_level,
        component_count: lc.count,
        distinct_components,
        transversality_margin: hrc.transversality_margin,
        transversality_pass,
        fan_size: hrc.fan.len(),
        fan_crossings_pass,
        sides_pass,
        pass,
    })
}

/// Component of `lc` whose cells cover the point, with a one-ring fallback
/// for points that sit on a node or just outside a crossing cell.
fn component_index_at(lc: &LevelComponents, grid: &Grid2d, x: &[f64]) -> Option<usize> {
    let res = grid.resolution();
    let lo = grid.bounds().lo();
    let (w, h) = grid.cell_size();
    let fx = (x[0] - lo[0]) / w;
    let fy = (x[1] - lo[1]) / h;
    if !fx.is_finite() || !fy.is_finite() {
        return None;
    }
    let cx = (fx.floor() as i64).clamp(0, res as i64 - 1) as usize;
    let cy = (fy.floor() as i64).clamp(0, res as i64 - 1) as usize;
    for ring in 0..2i64 {
        for dy in -ring..=ring {
            for dx in -ring..=ring {
                let nx = cx as i64 + dx;
                let ny = cy as i64 + dy;
                if nx < 0 || ny < 0 || nx >= res as i64 || ny >= res as i64 {
                    continue;
                }
                let cell = (nx as usize, ny as usize);
                for (ci, cells) in lc.component_cells.iter().enumerate() {
                    if cells.contains(&cell) {
                        return Some(ci);
                    }
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn model_box() -> AxisBox {
        AxisBox::new(vec![-0.5, -0.5], vec![2.0, 2.0])
    }

    #[test]
    fn model_edge_certifies() {
        let f = parse("x1*x2").unwrap();
        let hrc = construct_hrc(&f, &[0.0, 1.0], &[1.0, 0.0], &model_box()).unwrap();
        assert!((hrc.t_w - 0.5).abs() < 1e-9);
        assert!((hrc.w[0] - 0.5).abs() < 1e-9 && (hrc.w[1] - 0.5).abs() < 1e-9);
        assert!((hrc.tangent_level - 0.25).abs() < 1e-9);
        assert!(hrc.level.abs() < 1e-12);
        assert_eq!(hrc.fan.len(), FAN_SIZE);
        for leaf in &hrc.fan {
            assert!(leaf.t_exit > hrc.t_w);
            assert_eq!(leaf.crossing_count, 2);
        }
        assert!(hrc.sides.iter().all(|s| s.escaped && s.recrossings == 0));
        // exact margin at the window boundary: |1-2t| / (sqrt(2) * |(1-t, t)|)
        let t = 0.5 - TRANSVERSALITY_WINDOW;
        let expect = (1.0 - 2.0 * t) / (2f64.sqrt() * ((1.0 - t).powi(2) + t * t).sqrt());
        assert!((hrc.transversality_margin - expect).abs() < 1e-2);
    }

    #[test]
    fn circle_edge_is_same_leaf() {
        let f = parse("x1^2 + x2^2").unwrap();
        let r = construct_hrc(&f, &[1.0, 0.0], &[-1.0, 0.0], &model_box().scaled(2.0));
        assert!(matches!(r, Err(HrcReject::SameLeaf)), "{r:?}");
    }

    #[test]
    fn oval_pair_has_compact_sides() {
        let f = parse("(x1^2 - 1)^2 + x2^2").unwrap();
        let y = (0.25f64 - 0.1296).sqrt();
        let r = construct_hrc(
            &f,
            &[0.8, y],
            &[-0.8, y],
            &AxisBox::new(vec![-3.0, -3.0], vec![3.0, 3.0]),
        );
        assert!(matches!(r, Err(HrcReject::CompactSide { .. })), "{r:?}");
    }

    #[test]
    fn level_mismatch_rejected() {
        let f = parse("x1*x2").unwrap();
        let r = construct_hrc(&f, &[0.0, 1.0], &[1.0, 1.0], &model_box());
        assert!(matches!(r, Err(HrcReject::LevelMismatch { .. })));
    }

    #[test]
    fn refine_lands_on_level() {
        let f = parse("x1*(1 - x1*x2^2)").unwrap();
        let p = refine_to_level(&f, &[0.26, -1.99], 0.0).unwrap();
        assert!(f.eval(&p).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn detect_finds_dive_family_edge() {
        let f = parse("x1*(1 - x1*x2^2)").unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let hrc = detect_hrc_2d(&f, &b, 128, 40, &[0.0])
            .unwrap()
            .expect("edge");
        assert!(hrc.level.abs() < 1e-9);
        assert_eq!(hrc.fan.len(), FAN_SIZE);
        assert!(hrc.sides.iter().all(|s| s.escaped));
        let suite = validity_suite(&f, &hrc, &b).unwrap();
        assert!(suite.pass, "{suite:?}");
    }

    #[test]
    fn detect_finds_quadratic_perturbation_edge() {
        let f = parse("x1*(1 + x1*x2)").unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let hrc = detect_hrc_2d(&f, &b, 128, 40, &[0.0])
            .unwrap()
            .expect("edge");
        assert!(hrc.level.abs() < 1e-9);
        let suite = validity_suite(&f, &hrc, &b).unwrap();
        assert!(suite.pass, "{suite:?}");
    }

    #[test]
    fn detect_reports_none_for_trivial_foliation() {
        let f = parse("x1 + x2").unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        assert!(detect_hrc_2d(&f, &b, 64, 40, &[]).unwrap().is_none());
    }

    #[test]
    fn detect_rejects_non_submersion() {
        // grad(x1*x2) vanishes at the origin, which the probe grid hits
        let f = parse("x1*x2").unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let r = detect_hrc_2d(&f, &b, 64, 40, &[]);
        assert!(matches!(
            r,
            Err(DetectError::SubmersionViolation { .. })
        ));
    }

    #[test]
    fn budget_zero_scans_nothing() {
        let f = parse("x1*(1 - x1*x2^2)").unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        assert!(detect_hrc_2d(&f, &b, 64, 0, &[0.0]).unwrap().is_none());
    }

    #[test]
    fn dive_family_needs_expansion() {
        // leaves of this map dip far below the base box before returning,
        // so certification relies on the expanding retrace
        let f = parse("x1*(1 - x1*x2^2)").unwrap();
        let p = refine_to_level(&f, &[0.0, -2.0], 0.0).unwrap();
        let q = refine_to_level(&f, &[0.25, -2.0], 0.0).unwrap();
        let b = AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]);
        let hrc = construct_hrc(&f, &p, &q, &b).unwrap();
        assert!(hrc.fan.iter().any(|l| l.expansions > 0), "{:?}",
            hrc.fan.iter().map(|l| l.expansions).collect::<Vec<_>>());
        assert!((hrc.tangent_level - 1.0 / 16.0).abs() < 1e-6);
    }
}
