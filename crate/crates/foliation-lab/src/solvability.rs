//! Search for global-solvability obstructions of a vector field.
//!
//! An obstruction witness is an integral-curve interval whose endpoints lie
//! in a compact box K while an interior point escapes past a prescribed
//! radius. Finding one proves the field is not globally solvable; failing to
//! find one proves nothing, so the negative verdict is reported as
//! NO_OBSTRUCTION_FOUND rather than as solvability.
//!
//! The search runs a ladder of stages (growing escape radius), seeding each
//! stage with Halton points in K plus points pushed logarithmically close to
//! the faces of K: returning excursions typically enter through a thin
//! face layer, and uniform seeding never lands there. A stage that almost
//! succeeds triggers a zoom pass that drives its best seeds further toward
//! the face.

use crate::expr::Expr;
use crate::flow::{trace_both, TraceOptions, TracedCurve};
use crate::geom::{halton, AxisBox};
use crate::jacobian::JacobianBundle;
use crate::map::SmoothMap;
use crate::numeric::{dist, norm};
use serde::Serialize;

/// Containment slack used when testing curve points against K.
pub const K_SLACK: f64 = 1e-9;
/// Replayed witnesses must reproduce the escape norm to this relative size.
pub const REPLAY_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct PolicyStage {
    pub k_box: AxisBox,
    pub escape_radius: f64,
    pub seeds: usize,
}

/// Radius ladder {4, 8, 16} x outer_radius(K), 256 seeds per stage.
pub fn default_policy(k: &AxisBox) -> Vec<PolicyStage> {
    let r = k.outer_radius().max(1e-3);
    [4.0, 8.0, 16.0]
        .iter()
        .map(|m| PolicyStage {
            k_box: k.clone(),
            escape_radius: m * r,
            seeds: 256,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SeedKind {
    Halton,
    FaceDepth,
    Zoom,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedInfo {
    pub stage: usize,
    pub index: usize,
    pub kind: SeedKind,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolvabilityWitness {
    pub k_box: AxisBox,
    pub escape_radius: f64,
    pub seed: Vec<f64>,
    pub seed_info: SeedInfo,
    /// Last curve point inside K before the escape.
    pub a_prime: Vec<f64>,
    /// First curve point inside K after the escape.
    pub b_prime: Vec<f64>,
    /// The escaping point between them.
    pub z: Vec<f64>,
    pub z_norm: f64,
    /// Relative escape-norm deviation of the tightened replay.
    pub replay_deviation: f64,
    #[serde(skip)]
    pub curve: TracedCurve,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchStats {
    pub stages_run: usize,
    pub seeds_traced: usize,
    /// Best returning-excursion norm seen anywhere (may be short of the
    /// radius ladder).
    pub best_return_norm: f64,
    /// Curves that left the tracing box without returning; their fate
    /// beyond it is unknown.
    pub escaped_curves: usize,
    pub rejected_replays: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "verdict")]
pub enum SolvabilityOutcome {
    #[serde(rename = "NOT_SOLVABLE")]
    ObstructionFound {
        witness: Box<SolvabilityWitness>,
        stats: SearchStats,
    },
    #[serde(rename = "NO_OBSTRUCTION_FOUND")]
    NoObstructionFound {
        stats: SearchStats,
    },
}

impl SolvabilityOutcome {
    pub fn found(&self) -> bool {
        matches!(self, SolvabilityOutcome::ObstructionFound { .. })
    }

    pub fn verdict_name(&self) -> &'static str {
        match self {
            SolvabilityOutcome::ObstructionFound { .. } => "NOT_SOLVABLE",
            SolvabilityOutcome::NoObstructionFound { .. } => "NO_OBSTRUCTION_FOUND",
        }
    }
}

/// Verdict for one cofactor field of a map. A found witness proves the
/// field is not globally solvable; the negative direction stays open.
#[derive(Debug, Clone, Serialize)]
pub struct SolvabilityVerdict {
    pub map: String,
    pub index: usize,
    #[serde(flatten)]
    pub outcome: SolvabilityOutcome,
}

/// Run the staged witness search on the i-th cofactor field of F.
pub fn classify(
    map: &SmoothMap,
    i: usize,
    policy: &[PolicyStage],
    threads: usize,
) -> SolvabilityVerdict {
    assert!((1..=map.dim()).contains(&i), "field index out of range");
    let bundle = JacobianBundle::new(map);
    let field = bundle.cofactor_field(i);
    SolvabilityVerdict {
        map: map.name().to_string(),
        index: i,
        outcome: dh_witness_search(&field, policy, threads),
    }
}

/// A returning excursion on one traced curve: the farthest point that has
/// K-points both before and after it along the curve.
struct Excursion {
    a_index: usize,
    m_index: usize,
    b_index: usize,
    z_norm: f64,
}

fn best_excursion(curve: &TracedCurve, k: &AxisBox) -> Option<Excursion> {
    let n = curve.points.len();
    if n < 3 {
        return None;
    }
    let in_k: Vec<bool> = curve
        .points
        .iter()
        .map(|p| k.contains_slack(p, K_SLACK))
        .collect();
    let mut last_before: Vec<Option<usize>> = vec![None; n];
    let mut prev = None;
    for m in 0..n {
        last_before[m] = prev;
        if in_k[m] {
            prev = Some(m);
        }
    }
    let mut first_after: Vec<Option<usize>> = vec![None; n];
    let mut next = None;
    for m in (0..n).rev() {
        first_after[m] = next;
        if in_k[m] {
            next = Some(m);
        }
    }
    let mut best: Option<Excursion> = None;
    for m in 0..n {
        if in_k[m] {
            continue;
        }
        if let (Some(a), Some(b)) = (last_before[m], first_after[m]) {
            let z = norm(&curve.points[m]);
            if best.as_ref().map_or(true, |e| z > e.z_norm) {
                best = Some(Excursion {
                    a_index: a,
                    m_index: m,
                    b_index: b,
                    z_norm: z,
                });
            }
        }
    }
    best
}

fn stage_trace_options(stage: &PolicyStage) -> TraceOptions {
    let r = 2.0 * stage.escape_radius;
    let dim = stage.k_box.dim();
    let ball = AxisBox::new(vec![-r; dim], vec![r; dim]);
    let mut opts = TraceOptions::new(ball.hull(&stage.k_box));
    opts.max_arclength = 30.0 * stage.escape_radius + 10.0 * stage.k_box.diameter();
    opts
}

/// Face-depth seed: every coordinate Halton-uniform in K except one, which
/// is placed a logarithmic depth inside a chosen face. Depths sweep
/// 1e-1 .. 1e-12 of the axis width.
fn face_depth_seed(k: &AxisBox, j: usize, halton_offset: usize) -> Vec<f64> {
    let n = k.dim();
    let axis = j % n;
    let side = (j / n) % 2;
    let mut p = k.halton_point(halton_offset + j);
    let width = k.hi()[axis] - k.lo()[axis];
    let u = halton(j + 1, 2);
    let depth = width * 10f64.powf(-1.0 - 11.0 * u);
    p[axis] = if side == 0 {
        k.lo()[axis] + depth
    } else {
        k.hi()[axis] - depth
    };
    p
}

fn stage_seeds(stage: &PolicyStage, stage_index: usize) -> Vec<(SeedKind, Vec<f64>)> {
    let offset = stage_index * 10_000;
    let n_halton = stage.seeds / 2;
    let n_face = stage.seeds - n_halton;
    let mut seeds = Vec::with_capacity(stage.seeds);
    for i in 0..n_halton {
        seeds.push((SeedKind::Halton, stage.k_box.halton_point(offset + i)));
    }
    for j in 0..n_face {
        seeds.push((
            SeedKind::FaceDepth,
            face_depth_seed(&stage.k_box, offset + j, offset + 5_000),
        ));
    }
    seeds
}

/// Zoom refinement: drive a promising seed toward its nearest face by
/// repeated depth quartering.
fn zoom_seeds(k: &AxisBox, base: &[f64]) -> Vec<Vec<f64>> {
    let mut axis = 0;
    let mut side = 0;
    let mut depth = f64::INFINITY;
    for a in 0..k.dim() {
        let d_lo = base[a] - k.lo()[a];
        let d_hi = k.hi()[a] - base[a];
        if d_lo < depth {
            depth = d_lo;
            axis = a;
            side = 0;
        }
        if d_hi < depth {
            depth = d_hi;
            axis = a;
            side = 1;
        }
    }
    if !(depth > 0.0) || !depth.is_finite() {
        return Vec::new();
    }
    (1..=8)
        .map(|j| {
            let d = depth / 4f64.powi(j);
            let mut p = base.to_vec();
            p[axis] = if side == 0 { k.lo()[axis] + d } else { k.hi()[axis] - d };
            p
        })
        .collect()
}

struct ChunkOutcome {
    witness: Option<SolvabilityWitness>,
    traced: usize,
    escaped: usize,
    rejected: usize,
    best_return: f64,
    /// (seed index within stage, return norm, seed) of the chunk's best
    /// returning excursion, for the zoom pass.
    near_miss: Option<(usize, f64, Vec<f64>)>,
}

fn probe_seed(
    field: &[Expr],
    seed: &[f64],
    kind: SeedKind,
    stage: &PolicyStage,
    stage_index: usize,
    seed_index: usize,
    opts: &TraceOptions,
) -> (Option<SolvabilityWitness>, bool, f64, bool) {
    let curve = match trace_both(field, seed, opts) {
        Ok(c) => c,
        Err(_) => return (None, false, 0.0, false),
    };
    let escaped = curve.points.last().map_or(false, |p| !opts.bounds.contains_slack(p, -1e-6))
        || curve.points.first().map_or(false, |p| !opts.bounds.contains_slack(p, -1e-6));
    let exc = match best_excursion(&curve, &stage.k_box) {
        Some(e) => e,
        None => return (None, false, 0.0, escaped),
    };
    if exc.z_norm < stage.escape_radius {
        return (None, false, exc.z_norm, escaped);
    }
    // replay at tightened tolerance; the escape must reproduce
    let replay_opts = opts.refined(10.0);
    let rupt = match trace_both(field, seed, &replay_opts) {
        Ok(c) => c,
        Err(_) => return (None, true, exc.z_norm, escaped),
    };
    let rexc = match best_excursion(&rupt, &stage.k_box) {
        Some(e) if e.z_norm >= stage.escape_radius => e,
        _ => return (None, true, exc.z_norm, escaped),
    };
    let deviation = (exc.z_norm - rexc.z_norm).abs() / (1.0 + exc.z_norm);
    if deviation > REPLAY_TOLERANCE {
        return (None, true, exc.z_norm, escaped);
    }
    let w = SolvabilityWitness {
        k_box: stage.k_box.clone(),
        escape_radius: stage.escape_radius,
        seed: seed.to_vec(),
        seed_info: SeedInfo {
            stage: stage_index,
            index: seed_index,
            kind,
        },
        a_prime: curve.points[exc.a_index].clone(),
        b_prime: curve.points[exc.b_index].clone(),
        z: curve.points[exc.m_index].clone(),
        z_norm: exc.z_norm,
        replay_deviation: deviation,
        curve,
    };
    (Some(w), false, exc.z_norm, escaped)
}

fn run_chunk(
    field: &[Expr],
    seeds: &[(SeedKind, Vec<f64>)],
    base_index: usize,
    stage: &PolicyStage,
    stage_index: usize,
    opts: &TraceOptions,
) -> ChunkOutcome {
    let mut out = ChunkOutcome {
        witness: None,
        traced: 0,
        escaped: 0,
        rejected: 0,
        best_return: 0.0,
        near_miss: None,
    };
    for (off, (kind, seed)) in seeds.iter().enumerate() {
        let idx = base_index + off;
        out.traced += 1;
        let (w, rejected, ret, escaped) =
            probe_seed(field, seed, *kind, stage, stage_index, idx, opts);
        if escaped {
            out.escaped += 1;
        }
        if rejected {
            out.rejected += 1;
        }
        if ret > out.best_return {
            out.best_return = ret;
            if out.near_miss.as_ref().map_or(true, |(_, r, _)| ret > *r) {
                out.near_miss = Some((idx, ret, seed.clone()));
            }
        }
        if let Some(w) = w {
            out.witness = Some(w);
            break;
        }
    }
    out
}

/// Staged witness search. Seeds are probed in a fixed order; the first
/// confirmed witness in that order is returned regardless of `threads`, so
/// results are reproducible across thread counts.
pub fn dh_witness_search(
    field: &[Expr],
    policy: &[PolicyStage],
    threads: usize,
) -> SolvabilityOutcome {
    assert!(!policy.is_empty());
    let threads = threads.max(1);
    let mut stats = SearchStats {
        stages_run: 0,
        seeds_traced: 0,
        best_return_norm: 0.0,
        escaped_curves: 0,
        rejected_replays: 0,
    };
    for (stage_index, stage) in policy.iter().enumerate() {
        assert_eq!(field.len(), stage.k_box.dim());
        stats.stages_run += 1;
        let opts = stage_trace_options(stage);
        let mut seeds = stage_seeds(stage, stage_index);
        let mut near_miss_pool: Vec<(usize, f64, Vec<f64>)> = Vec::new();
        let mut passes = 0;
        loop {
            let result = sweep(
                field,
                &seeds,
                stage,
                stage_index,
                &opts,
                threads,
                &mut stats,
                &mut near_miss_pool,
            );
            if let Some(w) = result {
                return SolvabilityOutcome::ObstructionFound {
                    witness: Box::new(w),
                    stats,
                };
            }
            passes += 1;
            if passes >= 2 {
                break;
            }
            // zoom pass on the best near misses of the main pass
            near_miss_pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            near_miss_pool.truncate(4);
            let mut zoomed = Vec::new();
            for (_, _, base) in &near_miss_pool {
                for p in zoom_seeds(&stage.k_box, base) {
                    zoomed.push((SeedKind::Zoom, p));
                }
            }
            if zoomed.is_empty() {
                break;
            }
            seeds = zoomed;
        }
    }
    SolvabilityOutcome::NoObstructionFound { stats }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    field: &[Expr],
    seeds: &[(SeedKind, Vec<f64>)],
    stage: &PolicyStage,
    stage_index: usize,
    opts: &TraceOptions,
    threads: usize,
    stats: &mut SearchStats,
    near_miss_pool: &mut Vec<(usize, f64, Vec<f64>)>,
) -> Option<SolvabilityWitness> {
    let chunk = 8usize;
    let round = threads * chunk;
    let mut start = 0;
    while start < seeds.len() {
        let end = (start + round).min(seeds.len());
        let mut outcomes: Vec<ChunkOutcome> = Vec::new();
        if threads == 1 {
            outcomes.push(run_chunk(field, &seeds[start..end], start, stage, stage_index, opts));
        } else {
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                let mut c = start;
                while c < end {
                    let ce = (c + chunk).min(end);
                    let slice = &seeds[c..ce];
                    let base = c;
                    handles.push(scope.spawn(move || {
                        run_chunk(field, slice, base, stage, stage_index, opts)
                    }));
                    c = ce;
                }
                for h in handles {
                    outcomes.push(h.join().expect("probe thread panicked"));
                }
            });
        }
        let mut first: Option<SolvabilityWitness> = None;
        for o in outcomes {
            stats.seeds_traced += o.traced;
            stats.escaped_curves += o.escaped;
            stats.rejected_replays += o.rejected;
            stats.best_return_norm = stats.best_return_norm.max(o.best_return);
            if let Some(nm) = o.near_miss {
                near_miss_pool.push(nm);
            }
            if let Some(w) = o.witness {
                let better = first
                    .as_ref()
                    .map_or(true, |f| w.seed_info.index < f.seed_info.index);
                if better {
                    first = Some(w);
                }
            }
        }
        if first.is_some() {
            return first;
        }
        start = end;
    }
    None
}

/// Thread count from FOLIATION_LAB_THREADS; defaults to 1.
pub fn thread_count_from_env() -> usize {
    std::env::var("FOLIATION_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
        .unwrap_or(1)
}

/// Sanity helper for reports: both witness endpoints really sit in K and
/// the escape point clears the radius.
pub fn witness_is_valid(w: &SolvabilityWitness) -> bool {
    w.k_box.contains_slack(&w.a_prime, K_SLACK)
        && w.k_box.contains_slack(&w.b_prime, K_SLACK)
        && norm(&w.z) >= w.escape_radius
        && dist(&w.a_prime, &w.z) > 0.0
        && dist(&w.b_prime, &w.z) > 0.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn spiral_v1() -> Vec<Expr> {
        // tangent field of the level sets of exp(x1) sin(x2)
        vec![
            parse("exp(x1)*cos(x2)").unwrap(),
            parse("-exp(x1)*sin(x2)").unwrap(),
        ]
    }

    fn spiral_policy() -> Vec<PolicyStage> {
        let k = AxisBox::new(vec![-0.1, 0.0], vec![0.1, std::f64::consts::PI]);
        vec![PolicyStage {
            k_box: k,
            escape_radius: 6.7,
            seeds: 256,
        }]
    }

    #[test]
    fn spiral_field_yields_witness() {
        let out = dh_witness_search(&spiral_v1(), &spiral_policy(), 1);
        match out {
            SolvabilityOutcome::ObstructionFound { witness, .. } => {
                assert!(witness_is_valid(&witness));
                assert!(witness.z_norm >= 6.7);
                assert!(witness.replay_deviation <= REPLAY_TOLERANCE);
                // the deep excursion dives along negative x1
                assert!(witness.z[0] < -6.0, "z = {:?}", witness.z);
            }
            SolvabilityOutcome::NoObstructionFound { stats } => {
                panic!("expected witness, best return {}", stats.best_return_norm)
            }
        }
    }

    #[test]
    fn constant_field_has_no_obstruction() {
        let field = vec![parse("1").unwrap(), parse("0").unwrap()];
        let k = AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let policy = vec![PolicyStage {
            k_box: k,
            escape_radius: 8.0,
            seeds: 64,
        }];
        let out = dh_witness_search(&field, &policy, 1);
        match out {
            SolvabilityOutcome::NoObstructionFound { stats } => {
                assert!(stats.escaped_curves > 0);
                assert!(stats.best_return_norm < 8.0);
            }
            _ => panic!("straight flow cannot return"),
        }
    }

    #[test]
    fn witness_is_deterministic_across_threads() {
        let a = dh_witness_search(&spiral_v1(), &spiral_policy(), 1);
        let b = dh_witness_search(&spiral_v1(), &spiral_policy(), 4);
        match (&a, &b) {
            (
                SolvabilityOutcome::ObstructionFound { witness: wa, .. },
                SolvabilityOutcome::ObstructionFound { witness: wb, .. },
            ) => {
                assert_eq!(wa.seed_info.index, wb.seed_info.index);
                assert_eq!(wa.seed_info.kind, wb.seed_info.kind);
                assert_eq!(wa.z, wb.z);
            }
            _ => panic!("both searches must find the witness"),
        }
    }

    #[test]
    fn default_policy_ladder() {
        let k = AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]);
        let p = default_policy(&k);
        assert_eq!(p.len(), 3);
        let r = 2f64.sqrt();
        assert!((p[0].escape_radius - 4.0 * r).abs() < 1e-12);
        assert!((p[2].escape_radius - 16.0 * r).abs() < 1e-12);
        assert!(p.iter().all(|s| s.seeds == 256));
    }

    #[test]
    fn face_depth_reaches_thin_layers() {
        let k = AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]);
        let depths: Vec<f64> = (0..128)
            .map(|j| {
                let s = face_depth_seed(&k, j, 500);
                let a = j % 2;
                s[a].min(1.0 - s[a])
            })
            .collect();
        let min = depths.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min < 1e-10, "deepest layer {min}");
        assert!(depths.iter().any(|d| *d > 1e-3));
    }
}
