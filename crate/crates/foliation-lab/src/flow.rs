//! Integral curves of expression vector fields.
//!
//! Dormand-Prince 5(4) with FSAL and step control on a mixed
//! absolute/relative error norm. Curves stop at the trace box (the exit
//! point is bisected onto the boundary through the cubic Hermite dense
//! form), on an arclength or step budget, or when the step collapses, which
//! is what happens at zeros of the field. With `normalize` set the field is
//! rescaled to unit speed so the curve parameter is arclength; that is the
//! right chart for foliation work where component growth is exponential.

use crate::expr::{Expr, EvalError};
use crate::geom::AxisBox;
use crate::map::SmoothMap;
use crate::jacobian::JacobianBundle;
use crate::numeric::{dist, norm};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub bounds: AxisBox,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub max_arclength: f64,
    pub max_step: f64,
    pub normalize: bool,
    pub min_field_norm: f64,
}

impl TraceOptions {
    pub fn new(bounds: AxisBox) -> Self {
        TraceOptions {
            bounds,
            rtol: 1e-8,
            atol: 1e-10,
            max_steps: 200_000,
            max_arclength: 1e4,
            max_step: f64::INFINITY,
            normalize: true,
            min_field_norm: 1e-12,
        }
    }

    /// Same trace, tolerances tightened by `factor`. Used for replays.
    pub fn refined(&self, factor: f64) -> Self {
        let mut o = self.clone();
        o.rtol /= factor;
        o.atol /= factor;
        o
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    LeftBox,
    Budget,
    StepUnderflow,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TraceError {
    #[error("start point lies outside the trace box")]
    StartOutsideBox,
    #[error("field vanishes at the start point (|v| < {min:e})")]
    ZeroField { min: f64 },
    #[error("field evaluation failed at the start point: {0}")]
    FieldEval(EvalError),
}

/// One half-orbit. `times` is the curve parameter (arclength when traced
/// normalized), `velocities` holds the integrated right-hand side at each
/// accepted point, direction included.
#[derive(Debug, Clone)]
pub struct CurveSegment {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub termination: Termination,
    pub direction: f64,
    pub loop_suspect: bool,
}

enum RhsFail {
    Eval(EvalError),
    Zero,
}

fn rhs(
    field: &[Expr],
    x: &[f64],
    direction: f64,
    normalize: bool,
    min_field_norm: f64,
) -> Result<Vec<f64>, RhsFail> {
    let mut v = Vec::with_capacity(field.len());
    for e in field {
        v.push(e.eval(x).map_err(RhsFail::Eval)?);
    }
    let n = norm(&v);
    if n < min_field_norm {
        return Err(RhsFail::Zero);
    }
    let s = if normalize { direction / n } else { direction };
    Ok(v.iter().map(|c| c * s).collect())
}

// Dormand-Prince stage coefficients. The fields are autonomous so the c
// column is not needed.
const A: [&[f64]; 6] = [
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
    ],
    &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Cubic Hermite interpolant over one accepted step of size h.
pub fn hermite_point(x0: &[f64], v0: &[f64], x1: &[f64], v1: &[f64], h: f64, theta: f64) -> Vec<f64> {
    let t = theta;
    let h00 = 2.0 * t * t * t - 3.0 * t * t + 1.0;
    let h10 = t * t * t - 2.0 * t * t + t;
    let h01 = -2.0 * t * t * t + 3.0 * t * t;
    let h11 = t * t * t - t * t;
    (0..x0.len())
        .map(|i| h00 * x0[i] + h10 * h * v0[i] + h01 * x1[i] + h11 * h * v1[i])
        .collect()
}

pub fn trace(
    field: &[Expr],
    start: &[f64],
    direction: f64,
    opts: &TraceOptions,
) -> Result<CurveSegment, TraceError> {
    assert!(direction == 1.0 || direction == -1.0);
    assert_eq!(field.len(), opts.bounds.dim());
    if !opts.bounds.contains_slack(start, 1e-12) {
        return Err(TraceError::StartOutsideBox);
    }
    let eval = |x: &[f64]| rhs(field, x, direction, opts.normalize, opts.min_field_norm);
    let mut k1 = match eval(start) {
        Ok(v) => v,
        Err(RhsFail::Zero) => {
            return Err(TraceError::ZeroField {
                min: opts.min_field_norm,
            })
        }
        Err(RhsFail::Eval(e)) => return Err(TraceError::FieldEval(e)),
    };

    let mut x = start.to_vec();
    let mut t = 0.0f64;
    let mut arclength = 0.0f64;
    let mut times = vec![0.0];
    let mut points = vec![x.clone()];
    let mut velocities = vec![k1.clone()];

    // Loop detection: watch for a forward crossing of the section through
    // the start point normal to the initial velocity, close to the start.
    let mut loop_suspect = false;
    let loop_tol = 1e-5 * (1.0 + norm(start));
    let v0n = norm(&k1);
    let v0u: Vec<f64> = k1.iter().map(|v| v / v0n).collect();
    let section = |p: &[f64]| -> f64 {
        p.iter()
            .zip(start)
            .zip(&v0u)
            .map(|((a, b), u)| (a - b) * u)
            .sum()
    };
    let mut section_prev = 0.0f64;

    let mut h = (1e-3 * (1.0 + norm(&x)) / (1.0 + norm(&k1))).min(opts.max_step);
    let termination;

    // Persistent micro-steps mean the curve has run into a zero of the
    // field: the error control pins h there and the trace would otherwise
    // chatter until the step budget went up in smoke.
    let mut tiny_run = 0usize;

    let mut steps = 0usize;
    'outer: loop {
        if steps >= opts.max_steps {
            termination = Termination::Budget;
            break;
        }
        if h < 1e-12 * (1.0 + t.abs()) {
            termination = Termination::StepUnderflow;
            break;
        }
        steps += 1;

        // One attempted Dormand-Prince step from (t, x) with current k1.
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        let mut failed = false;
        for row in A.iter() {
            let mut xs = x.clone();
            for (j, a) in row.iter().enumerate() {
                if *a != 0.0 {
                    for i in 0..xs.len() {
                        xs[i] += h * a * ks[j][i];
                    }
                }
            }
            match eval(&xs) {
                Ok(v) => ks.push(v),
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            h *= 0.25;
            continue;
        }

        let mut x_new = x.clone();
        let mut err = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut acc5 = 0.0;
            let mut acc_err = 0.0;
            for j in 0..7 {
                acc5 += B5[j] * ks[j][i];
                acc_err += (B5[j] - B4[j]) * ks[j][i];
            }
            x_new[i] += h * acc5;
            err[i] = h * acc_err;
        }
        let mut err_norm = 0.0;
        for i in 0..x.len() {
            let scale = opts.atol + opts.rtol * x[i].abs().max(x_new[i].abs());
            let e = err[i] / scale;
            err_norm += e * e;
        }
        err_norm = (err_norm / x.len() as f64).sqrt();

        if err_norm > 1.0 {
            let shrink = (0.9 * err_norm.powf(-0.2)).max(0.2);
            h *= shrink;
            continue;
        }

        // Accepted. FSAL: the last stage is the derivative at x_new.
        let v_new = ks[6].clone();
        let h_used = h;
        let grow = (0.9 * err_norm.max(1e-10).powf(-0.2)).min(5.0).max(0.2);
        h = (h * grow).min(opts.max_step);

        if !opts.bounds.contains(&x_new) {
            // Bisect the dense form for the last parameter still inside.
            let mut th_lo = 0.0f64;
            let mut th_hi = 1.0f64;
            for _ in 0..60 {
                let mid = 0.5 * (th_lo + th_hi);
                let p = hermite_point(&x, &ks[0], &x_new, &v_new, h_used, mid);
                if opts.bounds.contains(&p) {
                    th_lo = mid;
                } else {
                    th_hi = mid;
                }
                if (th_hi - th_lo) * h_used * (1.0 + norm(&v_new)) < 1e-9 {
                    break;
                }
            }
            let p_exit = hermite_point(&x, &ks[0], &x_new, &v_new, h_used, th_lo);
            let v_exit = eval(&p_exit).unwrap_or(v_new);
            t += th_lo * h_used;
            times.push(t);
            points.push(p_exit);
            velocities.push(v_exit);
            termination = Termination::LeftBox;
            break 'outer;
        }

        t += h_used;
        arclength += dist(&x_new, &x);
        x = x_new;
        k1 = v_new;
        times.push(t);
        points.push(x.clone());
        velocities.push(k1.clone());

        if h_used < 1e-6 * (1.0 + t.abs()) {
            tiny_run += 1;
            if tiny_run > 500 {
                termination = Termination::StepUnderflow;
                break;
            }
        } else {
            tiny_run = 0;
        }

        let section_new = section(&x);
        if !loop_suspect
            && arclength > 100.0 * loop_tol
            && section_prev < 0.0
            && section_new >= 0.0
            && crate::numeric::dot(&k1, &v0u) > 0.0
        {
            // Refine the crossing on the dense form and see whether the
            // orbit actually returned to the start.
            let m = points.len();
            let (p0, p1) = (&points[m - 2], &points[m - 1]);
            let (w0, w1) = (&velocities[m - 2], &velocities[m - 1]);
            let (mut th_lo, mut th_hi) = (0.0f64, 1.0f64);
            for _ in 0..60 {
                let mid = 0.5 * (th_lo + th_hi);
                let p = hermite_point(p0, w0, p1, w1, h_used, mid);
                if section(&p) < 0.0 {
                    th_lo = mid;
                } else {
                    th_hi = mid;
                }
            }
            let p_cross = hermite_point(p0, w0, p1, w1, h_used, th_hi);
            if dist(&p_cross, start) < loop_tol {
                loop_suspect = true;
            }
        }
        section_prev = section_new;

        if arclength >= opts.max_arclength {
            termination = Termination::Budget;
            break;
        }
    }

    Ok(CurveSegment {
        times,
        points,
        velocities,
        termination,
        direction,
        loop_suspect,
    })
}

/// Both half-orbits through one point, glued into a single parametrized
/// curve with d x / d s equal to the forward field everywhere.
#[derive(Debug, Clone)]
pub struct TracedCurve {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub backward_termination: Termination,
    pub forward_termination: Termination,
    pub loop_suspect: bool,
    /// Index of the seed point inside `points`.
    pub start_index: usize,
}

pub fn glue(backward: CurveSegment, forward: CurveSegment) -> TracedCurve {
    assert_eq!(backward.direction, -1.0);
    assert_eq!(forward.direction, 1.0);
    let cap = backward.times.len() + forward.times.len() - 1;
    let mut times = Vec::with_capacity(cap);
    let mut points = Vec::with_capacity(cap);
    let mut velocities = Vec::with_capacity(cap);
    for i in (1..backward.times.len()).rev() {
        times.push(-backward.times[i]);
        points.push(backward.points[i].clone());
        velocities.push(backward.velocities[i].iter().map(|v| -v).collect());
    }
    let start_index = points.len();
    for i in 0..forward.times.len() {
        times.push(forward.times[i]);
        points.push(forward.points[i].clone());
        velocities.push(forward.velocities[i].clone());
    }
    TracedCurve {
        times,
        points,
        velocities,
        backward_termination: backward.termination,
        forward_termination: forward.termination,
        loop_suspect: backward.loop_suspect || forward.loop_suspect,
        start_index,
    }
}

pub fn trace_both(
    field: &[Expr],
    start: &[f64],
    opts: &TraceOptions,
) -> Result<TracedCurve, TraceError> {
    let b = trace(field, start, -1.0, opts)?;
    let f = trace(field, start, 1.0, opts)?;
    Ok(glue(b, f))
}

/// First curve point (by parameter) where `g` crosses `target`, located by
/// bisection of the Hermite dense form between stored samples.
pub fn locate_value(curve: &TracedCurve, g: &Expr, target: f64) -> Option<Vec<f64>> {
    for w in 0..curve.points.len().saturating_sub(1) {
        let (p0, p1) = (&curve.points[w], &curve.points[w + 1]);
        let (g0, g1) = (g.eval(p0).ok()?, g.eval(p1).ok()?);
        let (d0, d1) = (g0 - target, g1 - target);
        if d0 == 0.0 {
            return Some(p0.clone());
        }
        if d0 * d1 > 0.0 {
            continue;
        }
        let h = curve.times[w + 1] - curve.times[w];
        let (v0, v1) = (&curve.velocities[w], &curve.velocities[w + 1]);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut dlo = d0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let p = hermite_point(p0, v0, p1, v1, h, mid);
            let d = g.eval(&p).ok()? - target;
            if d == 0.0 || (hi - lo) < 1e-15 {
                return Some(p);
            }
            if d * dlo <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
                dlo = d;
            }
        }
        return Some(hermite_point(p0, v0, p1, v1, h, 0.5 * (lo + hi)));
    }
    None
}

/// Signed distance from x to the boundary of the box: positive inside,
/// negative outside, zero on a face.
pub fn boundary_distance(bounds: &AxisBox, x: &[f64]) -> f64 {
    let mut d = f64::INFINITY;
    for i in 0..bounds.dim() {
        d = d.min(x[i] - bounds.lo()[i]).min(bounds.hi()[i] - x[i]);
    }
    d
}

/// How well a traced curve behaves as a leaf of the i-th cofactor
/// foliation: every other component of F should be constant along it, and
/// f_i should move monotonically wherever det DF keeps one sign.
#[derive(Debug, Clone, Serialize)]
pub struct CurveDiagnostics {
    pub max_invariant_drift: f64,
    pub drift_tolerance: f64,
    pub invariants_pass: bool,
    pub monotone_checked: bool,
    pub monotone: bool,
    pub monotone_violations: usize,
}

pub fn curve_diagnostics(
    curve: &TracedCurve,
    map: &SmoothMap,
    bundle: &JacobianBundle,
    i: usize,
    drift_tolerance: f64,
) -> CurveDiagnostics {
    let n = map.dim();
    let x0 = &curve.points[curve.start_index];
    let mut max_drift = 0.0f64;
    let mut baseline = Vec::with_capacity(n);
    for k in 1..=n {
        baseline.push(map.component(k).eval(x0).unwrap_or(f64::NAN));
    }
    for p in &curve.points {
        for k in 1..=n {
            if k == i {
                continue;
            }
            if let Ok(v) = map.component(k).eval(p) {
                let b = baseline[k - 1];
                if b.is_finite() {
                    max_drift = max_drift.max((v - b).abs() / (1.0 + b.abs()));
                }
            }
        }
    }

    // Monotonicity of f_i only means something when det DF is sign-definite
    // along the samples; otherwise report it unchecked.
    let mut sign = 0.0f64;
    let mut definite = true;
    for p in &curve.points {
        match bundle.det_at(p) {
            Ok(d) if d != 0.0 => {
                if sign == 0.0 {
                    sign = d.signum();
                } else if d.signum() != sign {
                    definite = false;
                    break;
                }
            }
            _ => {
                definite = false;
                break;
            }
        }
    }
    let mut violations = 0usize;
    if definite {
        let fi: Vec<f64> = curve
            .points
            .iter()
            .map(|p| map.component(i).eval(p).unwrap_or(f64::NAN))
            .collect();
        for w in fi.windows(2) {
            let d = w[1] - w[0];
            let tol = 1e-12 * (1.0 + w[0].abs().max(w[1].abs()));
            if d.abs() <= tol {
                continue;
            }
            // along the forward parameter f_i must move with sign(det)
            if d.signum() != sign {
                violations += 1;
            }
        }
    }
    CurveDiagnostics {
        max_invariant_drift: max_drift,
        drift_tolerance,
        invariants_pass: max_drift <= drift_tolerance,
        monotone_checked: definite,
        monotone: definite && violations == 0,
        monotone_violations: violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn unit_box2() -> AxisBox {
        AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0])
    }

    #[test]
    fn straight_flow_exits_box() {
        let field = vec![parse("1").unwrap(), parse("0").unwrap()];
        let opts = TraceOptions::new(unit_box2());
        let seg = trace(&field, &[0.0, 0.0], 1.0, &opts).unwrap();
        assert_eq!(seg.termination, Termination::LeftBox);
        let last = seg.points.last().unwrap();
        assert!((last[0] - 1.0).abs() < 1e-8);
        assert!(boundary_distance(&opts.bounds, last) >= 0.0);
        assert!((seg.times.last().unwrap() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn circular_flow_flags_loop() {
        let field = vec![parse("-x2").unwrap(), parse("x1").unwrap()];
        let mut opts = TraceOptions::new(AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]));
        opts.max_arclength = 10.0;
        let seg = trace(&field, &[1.0, 0.0], 1.0, &opts).unwrap();
        assert_eq!(seg.termination, Termination::Budget);
        assert!(seg.loop_suspect);
        // every point stays on the unit circle
        for p in &seg.points {
            assert!((norm(p) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn vanishing_field_underflows() {
        let field = vec![parse("x1").unwrap(), parse("0").unwrap()];
        let opts = TraceOptions::new(unit_box2());
        // flowing backward from x1 = -0.5 pushes toward the zero at x1 = 0
        let seg = trace(&field, &[-0.5, 0.0], -1.0, &opts).unwrap();
        assert_eq!(seg.termination, Termination::StepUnderflow);
        let last = seg.points.last().unwrap();
        assert!(last[0].abs() < 1e-6, "stopped at {last:?}");
    }

    #[test]
    fn zero_field_at_start_errors() {
        let field = vec![parse("x1").unwrap(), parse("x2").unwrap()];
        let opts = TraceOptions::new(unit_box2());
        assert!(matches!(
            trace(&field, &[0.0, 0.0], 1.0, &opts),
            Err(TraceError::ZeroField { .. })
        ));
    }

    #[test]
    fn glue_is_seamless() {
        let field = vec![parse("1").unwrap(), parse("0").unwrap()];
        let opts = TraceOptions::new(unit_box2());
        let curve = trace_both(&field, &[0.25, 0.0], &opts).unwrap();
        assert!((curve.times[0] + 1.25).abs() < 1e-7);
        assert!((curve.times.last().unwrap() - 0.75).abs() < 1e-7);
        for w in curve.times.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert_eq!(curve.points[curve.start_index], vec![0.25, 0.0]);
        // velocities all point forward after gluing
        for v in &curve.velocities {
            assert!(v[0] > 0.0);
        }
    }

    #[test]
    fn locate_value_on_circle() {
        let field = vec![parse("-x2").unwrap(), parse("x1").unwrap()];
        let mut opts = TraceOptions::new(AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]));
        opts.max_arclength = 3.0;
        opts.max_step = 0.05;
        let curve = trace_both(&field, &[1.0, 0.0], &opts).unwrap();
        let g = parse("x2").unwrap();
        let p = locate_value(&curve, &g, 0.5).unwrap();
        // on the unit circle x2 = 0.5 meets x1 = sqrt(3)/2
        assert!((p[1] - 0.5).abs() < 1e-9);
        assert!((p[0] - 0.75f64.sqrt()).abs() < 1e-7, "{p:?}");
    }
}
