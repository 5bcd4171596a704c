//! Exhaustion regions described by chart files.
//!
//! A region file gives a family P_k of subsets of map space, one per value
//! of a parameter k: a volume chart from the unit cube, boundary patches of
//! two kinds (Q patches ride a single leaf of the stated function, L
//! patches stay inside a fixed k-independent set), an interior reference
//! point, optional pointwise constraints, and corner points the boundary
//! must reach. The checker integrates over the family and verifies that the
//! declared structure is real:
//!
//!   - the leaf function is constant on every Q patch,
//!   - the flux of f_n V_n through Q patches vanishes (the field is
//!     tangent to leaves),
//!   - the volume integral of det DF closes against the total boundary
//!     flux, which doubles as a check that the patches tile the boundary,
//!   - L patches stay inside the fixed L set, whose absolute flux bounds
//!     every L contribution,
//!   - corners are hit by patch boundaries and constraints stay
//!     nonnegative on volume samples.
//!
//! On top of that it integrates a chosen density over P_k along a ladder
//! of k values and classifies the trend as divergent (logarithmic growth)
//! or convergent (reciprocal approach to a limit). A divergent trend
//! against a bounded L flux is the measure obstruction: the boundary of
//! such an exhaustion could never absorb the growing interior integral.

use crate::expr::{parse_with_symbols, Expr, ParseError};
use crate::jacobian::{det_expr, JacobianBundle};
use crate::map::SmoothMap;
use crate::numeric::{dist, fit_line, norm, point_segment_dist};
use crate::reeb::integrate::{adaptive_cube, QuadError};
use serde::Serialize;

pub const Q_LEAF_TOL: f64 = 1e-8;
pub const Q_FLUX_TOL: f64 = 1e-6;
pub const CLOSURE_TOL: f64 = 1e-4;
pub const FLUX_SLACK: f64 = 1e-3;
pub const CORNER_TOL: f64 = 1e-6;
pub const CONTAIN_TOL: f64 = 1e-6;
pub const CONSTRAINT_SLACK: f64 = 1e-9;
pub const TANGENCY_RESID_TOL: f64 = 1e-6;
pub const QUAD_REL_TOL: f64 = 1e-6;
pub const TREND_R2: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PatchRole {
    Q,
    L,
    LFixed,
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub name: String,
    pub role: PatchRole,
    pub comps: Vec<Expr>,
}

#[derive(Debug, Clone)]
pub struct RegionSpec {
    pub name: String,
    pub dim: usize,
    /// Function whose leaves carry the Q patches, in x variables.
    pub leaf_fn: Expr,
    /// Reference point inside P_k, used to orient outward normals.
    pub interior: Vec<f64>,
    /// Chart from the unit cube, components in (t1..tn, k).
    pub volume: Vec<Expr>,
    pub patches: Vec<Patch>,
    /// Nonnegative on P_k, in (x1..xn, k).
    pub constraints: Vec<Expr>,
    /// Points patch boundaries must reach, components in (k).
    pub corners: Vec<Vec<Expr>>,
}

impl RegionSpec {
    pub fn patches_with_role(&self, role: PatchRole) -> impl Iterator<Item = &Patch> {
        self.patches.iter().filter(move |p| p.role == role)
    }
}

#[derive(Debug)]
pub enum RegionError {
    Syntax { line: usize, message: String },
    Invalid(String),
}

impl std::fmt::Display for RegionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionError::Syntax { line, message } => write!(f, "line {line}: {message}"),
            RegionError::Invalid(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for RegionError {}

fn syntax(line: usize, message: impl Into<String>) -> RegionError {
    RegionError::Syntax {
        line,
        message: message.into(),
    }
}

fn expr_err(line: usize, e: ParseError) -> RegionError {
    syntax(line, format!("column {}: {}", e.col, e.message))
}

fn t_symbols(count: usize, with_k: bool) -> Vec<String> {
    let mut s: Vec<String> = (1..=count).map(|i| format!("t{i}")).collect();
    if with_k {
        s.push("k".into());
    }
    s
}

fn parse_expr_list(
    raw: &str,
    symbols: &[String],
    expected: usize,
    line: usize,
) -> Result<Vec<Expr>, RegionError> {
    let syms: Vec<&str> = symbols.iter().map(|s| s.as_str()).collect();
    let parts: Vec<&str> = raw.split(';').collect();
    if parts.len() != expected {
        return Err(syntax(
            line,
            format!(
                "expected {expected} components separated by ';', got {}",
                parts.len()
            ),
        ));
    }
    parts
        .iter()
        .map(|p| parse_with_symbols(p, &syms).map_err(|e| expr_err(line, e)))
        .collect()
}

pub fn parse_region(text: &str) -> Result<RegionSpec, RegionError> {
    // dim first, so expressions can bind their symbols
    let mut dim = None;
    for (ln0, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if let Some(rest) = line.strip_prefix("dim") {
            if let Some(v) = rest.trim_start().strip_prefix('=') {
                let d: usize = v
                    .trim()
                    .parse()
                    .map_err(|_| syntax(ln0 + 1, "dim must be an integer"))?;
                if !(2..=8).contains(&d) {
                    return Err(syntax(ln0 + 1, "dim must be between 2 and 8"));
                }
                if dim.replace(d).is_some() {
                    return Err(syntax(ln0 + 1, "duplicate dim"));
                }
            }
        }
    }
    let dim = dim.ok_or_else(|| RegionError::Invalid("missing dim".into()))?;
    let x_syms: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    let xk_syms: Vec<String> = x_syms.iter().cloned().chain(["k".into()]).collect();
    let vol_syms = t_symbols(dim, true);
    let patch_syms = t_symbols(dim - 1, true);
    let fixed_syms = t_symbols(dim - 1, false);
    let k_syms = vec![String::from("k")];

    let mut name = None;
    let mut leaf_fn = None;
    let mut interior = None;
    let mut volume = None;
    let mut patches: Vec<Patch> = Vec::new();
    let mut constraints = Vec::new();
    let mut corners = Vec::new();

    for (ln0, raw) in text.lines().enumerate() {
        let ln = ln0 + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| syntax(ln, "expected key = value"))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(syntax(ln, "empty value"));
        }
        match key {
            "name" => {
                if name.replace(value.to_string()).is_some() {
                    return Err(syntax(ln, "duplicate name"));
                }
            }
            "dim" => {}
            "f" => {
                let syms: Vec<&str> = x_syms.iter().map(|s| s.as_str()).collect();
                let e = parse_with_symbols(value, &syms).map_err(|e| expr_err(ln, e))?;
                if leaf_fn.replace(e).is_some() {
                    return Err(syntax(ln, "duplicate f"));
                }
            }
            "interior" => {
                let pt: Result<Vec<f64>, _> =
                    value.split(',').map(|v| v.trim().parse::<f64>()).collect();
                let pt =
                    pt.map_err(|_| syntax(ln, "interior must be a comma list of numbers"))?;
                if pt.len() != dim {
                    return Err(syntax(ln, format!("interior needs {dim} coordinates")));
                }
                if interior.replace(pt).is_some() {
                    return Err(syntax(ln, "duplicate interior"));
                }
            }
            "volume" => {
                let e = parse_expr_list(value, &vol_syms, dim, ln)?;
                if volume.replace(e).is_some() {
                    return Err(syntax(ln, "duplicate volume"));
                }
            }
            "constraint" => {
                let syms: Vec<&str> = xk_syms.iter().map(|s| s.as_str()).collect();
                constraints
                    .push(parse_with_symbols(value, &syms).map_err(|e| expr_err(ln, e))?);
            }
            "corner" => {
                corners.push(parse_expr_list(value, &k_syms, dim, ln)?);
            }
            other => {
                let (kind, pname) = other
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| syntax(ln, format!("unknown key '{other}'")))?;
                let role = match kind {
                    "qpatch" => PatchRole::Q,
                    "lpatch" => PatchRole::L,
                    "lfixed" => PatchRole::LFixed,
                    _ => return Err(syntax(ln, format!("unknown key '{kind}'"))),
                };
                let symbols = if role == PatchRole::LFixed {
                    &fixed_syms
                } else {
                    &patch_syms
                };
                let comps = parse_expr_list(value, symbols, dim, ln)?;
                let pname = pname.trim();
                if patches.iter().any(|p| p.name == pname && p.role == role) {
                    return Err(syntax(ln, format!("duplicate patch '{pname}'")));
                }
                patches.push(Patch {
                    name: pname.to_string(),
                    role,
                    comps,
                });
            }
        }
    }

    let spec = RegionSpec {
        name: name.ok_or_else(|| RegionError::Invalid("missing name".into()))?,
        dim,
        leaf_fn: leaf_fn.ok_or_else(|| RegionError::Invalid("missing f".into()))?,
        interior: interior.ok_or_else(|| RegionError::Invalid("missing interior".into()))?,
        volume: volume.ok_or_else(|| RegionError::Invalid("missing volume".into()))?,
        patches,
        constraints,
        corners,
    };
    if spec.patches_with_role(PatchRole::Q).next().is_none() {
        return Err(RegionError::Invalid("no qpatch declared".into()));
    }
    if spec.patches_with_role(PatchRole::LFixed).next().is_none() {
        return Err(RegionError::Invalid("no lfixed declared".into()));
    }
    Ok(spec)
}

/// Density integrated over P_k for the trend analysis.
#[derive(Debug, Clone)]
pub enum Integrand {
    One,
    Det,
    Custom(Expr),
}

impl Integrand {
    pub fn label(&self) -> String {
        match self {
            Integrand::One => "1".into(),
            Integrand::Det => "det".into(),
            Integrand::Custom(e) => format!("{e}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TrendVerdict {
    #[serde(rename = "DIVERGENT_TREND")]
    Divergent,
    #[serde(rename = "BOUNDED_TREND")]
    Convergent,
    #[serde(rename = "INCONCLUSIVE")]
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct ObstructionTrend {
    pub k_values: Vec<f64>,
    pub s_values: Vec<f64>,
    pub log_slope: f64,
    pub log_intercept: f64,
    pub log_r2: f64,
    pub log_ssr: f64,
    pub recip_limit: f64,
    pub recip_beta: f64,
    pub recip_r2: f64,
    pub recip_ssr: f64,
    pub verdict: TrendVerdict,
}

/// Fit s ~ a ln k + b against s ~ s_inf + beta/k and pick a verdict.
/// Divergence requires positive growth, a tight log fit, and the log model
/// beating the reciprocal one.
pub fn classify_trend(k_values: &[f64], s_values: &[f64]) -> ObstructionTrend {
    assert!(k_values.len() == s_values.len() && k_values.len() >= 3);
    let ln_k: Vec<f64> = k_values.iter().map(|k| k.ln()).collect();
    let inv_k: Vec<f64> = k_values.iter().map(|k| 1.0 / k).collect();
    let (a, b, r2_log, ssr_log) = fit_line(&ln_k, s_values);
    let (beta, s_inf, r2_recip, ssr_recip) = fit_line(&inv_k, s_values);
    let verdict = if a > 0.0 && r2_log >= TREND_R2 && ssr_log <= ssr_recip {
        TrendVerdict::Divergent
    } else if ssr_recip <= ssr_log {
        TrendVerdict::Convergent
    } else {
        TrendVerdict::Inconclusive
    };
    ObstructionTrend {
        k_values: k_values.to_vec(),
        s_values: s_values.to_vec(),
        log_slope: a,
        log_intercept: b,
        log_r2: r2_log,
        log_ssr: ssr_log,
        recip_limit: s_inf,
        recip_beta: beta,
        recip_r2: r2_recip,
        recip_ssr: ssr_recip,
        verdict,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PatchFluxRow {
    pub name: String,
    pub role: PatchRole,
    pub flux: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KRow {
    pub k: f64,
    pub s_value: f64,
    pub det_integral: f64,
    pub q_flux: f64,
    pub l_flux: f64,
    pub patch_fluxes: Vec<PatchFluxRow>,
    pub closure_error: f64,
    pub closure_pass: bool,
    pub q_constancy_dev: f64,
    pub q_constancy_pass: bool,
    /// Largest normalized |<V_n, N>| over Q samples; the field must be
    /// tangent to a leaf patch.
    pub q_tangency_max: f64,
    pub q_tangency_pass: bool,
    pub q_flux_pass: bool,
    pub l_bound_pass: bool,
    pub constraint_min: f64,
    pub constraint_pass: bool,
    /// Volume samples at this rung satisfy the next rung's constraints.
    pub nesting_pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegionReport {
    pub name: String,
    pub dim: usize,
    pub integrand: String,
    pub flux_bound_m: f64,
    pub rows: Vec<KRow>,
    pub corner_max_miss: f64,
    pub corners_pass: bool,
    pub containment_max_dist: f64,
    pub containment_pass: bool,
    pub trend: ObstructionTrend,
    pub structure_pass: bool,
}

#[derive(Debug)]
pub enum RegionCheckError {
    Quadrature(QuadError),
    Eval(String),
    Mismatch(String),
    NegativeH { point: Vec<f64>, value: f64 },
}

impl std::fmt::Display for RegionCheckError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RegionCheckError::Quadrature(q) => write!(f, "{q}"),
            RegionCheckError::Eval(m) => write!(f, "evaluation failed: {m}"),
            RegionCheckError::Mismatch(m) => write!(f, "{m}"),
            RegionCheckError::NegativeH { point, value } => {
                write!(f, "NEGATIVE_H: integrand is {value} at {point:?}")
            }
        }
    }
}

impl std::error::Error for RegionCheckError {}

impl From<QuadError> for RegionCheckError {
    fn from(q: QuadError) -> Self {
        RegionCheckError::Quadrature(q)
    }
}

fn eval_chart(comps: &[Expr], args: &[f64]) -> Result<Vec<f64>, RegionCheckError> {
    comps
        .iter()
        .map(|c| {
            c.eval(args)
                .map_err(|e| RegionCheckError::Eval(format!("chart: {e}")))
        })
        .collect()
}

/// Unnormalized outward-candidate normal: 2D tangent rotation, 3D cross
/// product. Its length carries the area element.
fn raw_normal(tangents: &[Vec<f64>]) -> Vec<f64> {
    match tangents.len() {
        1 => vec![tangents[0][1], -tangents[0][0]],
        2 => {
            let (u, v) = (&tangents[0], &tangents[1]);
            vec![
                u[1] * v[2] - u[2] * v[1],
                u[2] * v[0] - u[0] * v[2],
                u[0] * v[1] - u[1] * v[0],
            ]
        }
        _ => panic!("flux normals are implemented for dim 2 and 3 only"),
    }
}

fn unit_grid(params: usize, per_axis: usize) -> Vec<Vec<f64>> {
    let mut pts = vec![Vec::new()];
    for _ in 0..params {
        let mut next = Vec::new();
        for p in &pts {
            for i in 0..per_axis {
                let mut q = p.clone();
                q.push(i as f64 / (per_axis - 1) as f64);
                next.push(q);
            }
        }
        pts = next;
    }
    pts
}

fn boundary_grid(params: usize, per_axis: usize) -> Vec<Vec<f64>> {
    unit_grid(params, per_axis)
        .into_iter()
        .filter(|p| p.iter().any(|t| *t == 0.0 || *t == 1.0))
        .collect()
}

fn point_triangle_dist(p: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let ac: Vec<f64> = c.iter().zip(a).map(|(x, y)| x - y).collect();
    let ap: Vec<f64> = p.iter().zip(a).map(|(x, y)| x - y).collect();
    let d00: f64 = ab.iter().map(|v| v * v).sum();
    let d01: f64 = ab.iter().zip(&ac).map(|(x, y)| x * y).sum();
    let d11: f64 = ac.iter().map(|v| v * v).sum();
    let d20: f64 = ap.iter().zip(&ab).map(|(x, y)| x * y).sum();
    let d21: f64 = ap.iter().zip(&ac).map(|(x, y)| x * y).sum();
    let denom = d00 * d11 - d01 * d01;
    if denom.abs() > 1e-300 {
        let v = (d11 * d20 - d01 * d21) / denom;
        let w = (d00 * d21 - d01 * d20) / denom;
        if v >= 0.0 && w >= 0.0 && v + w <= 1.0 {
            let proj: Vec<f64> = (0..p.len())
                .map(|i| a[i] + v * ab[i] + w * ac[i])
                .collect();
            return dist(p, &proj);
        }
    }
    point_segment_dist(p, a, b)
        .min(point_segment_dist(p, a, c))
        .min(point_segment_dist(p, b, c))
}

/// Sampled geometry of the fixed L set, built once per check.
enum LFixedMesh {
    Segments(Vec<(Vec<f64>, Vec<f64>)>),
    Triangles(Vec<[Vec<f64>; 3]>),
}

impl LFixedMesh {
    fn build(spec: &RegionSpec) -> Result<Self, RegionCheckError> {
        let params = spec.dim - 1;
        let per_axis = 33;
        match params {
            1 => {
                let mut segs = Vec::new();
                for patch in spec.patches_with_role(PatchRole::LFixed) {
                    let mut prev: Option<Vec<f64>> = None;
                    for i in 0..per_axis {
                        let t = [i as f64 / (per_axis - 1) as f64];
                        let x = eval_chart(&patch.comps, &t)?;
                        if let Some(pr) = prev.take() {
                            segs.push((pr, x.clone()));
                        }
                        prev = Some(x);
                    }
                }
                Ok(LFixedMesh::Segments(segs))
            }
            2 => {
                let mut tris = Vec::new();
                for patch in spec.patches_with_role(PatchRole::LFixed) {
                    let mut rows: Vec<Vec<Vec<f64>>> = Vec::new();
                    for i in 0..per_axis {
                        let mut row = Vec::new();
                        for j in 0..per_axis {
                            let t = [
                                i as f64 / (per_axis - 1) as f64,
                                j as f64 / (per_axis - 1) as f64,
                            ];
                            row.push(eval_chart(&patch.comps, &t)?);
                        }
                        rows.push(row);
                    }
                    for i in 0..per_axis - 1 {
                        for j in 0..per_axis - 1 {
                            tris.push([
                                rows[i][j].clone(),
                                rows[i + 1][j].clone(),
                                rows[i][j + 1].clone(),
                            ]);
                            tris.push([
                                rows[i + 1][j].clone(),
                                rows[i + 1][j + 1].clone(),
                                rows[i][j + 1].clone(),
                            ]);
                        }
                    }
                }
                Ok(LFixedMesh::Triangles(tris))
            }
            _ => Err(RegionCheckError::Mismatch(
                "containment checks support dim 2 and 3 only".into(),
            )),
        }
    }

    fn distance(&self, p: &[f64]) -> f64 {
        match self {
            LFixedMesh::Segments(segs) => segs
                .iter()
                .map(|(a, b)| point_segment_dist(p, a, b))
                .fold(f64::INFINITY, f64::min),
            LFixedMesh::Triangles(tris) => tris
                .iter()
                .map(|t| point_triangle_dist(p, &t[0], &t[1], &t[2]))
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Precomputed machinery shared across the k ladder.
struct Engine<'a> {
    spec: &'a RegionSpec,
    map: &'a SmoothMap,
    bundle: JacobianBundle,
    cofactor_n: Vec<Expr>,
    /// Symbolic det of the volume chart Jacobian in (t1..tn, k).
    volume_jacobian: Expr,
    /// Symbolic tangent columns per patch, indexed like spec.patches.
    patch_tangents: Vec<Vec<Vec<Expr>>>,
    lfixed: LFixedMesh,
}

impl<'a> Engine<'a> {
    fn new(map: &'a SmoothMap, spec: &'a RegionSpec) -> Result<Self, RegionCheckError> {
        if map.dim() != spec.dim {
            return Err(RegionCheckError::Mismatch(format!(
                "map dimension {} does not match region dimension {}",
                map.dim(),
                spec.dim
            )));
        }
        // The region's foliation function must be the map's first component,
        // or the leaf/flux bookkeeping below is about two different objects.
        for j in 0..64 {
            let x = map.domain().halton_point(j);
            let a = map.component(1).eval(&x);
            let b = spec.leaf_fn.eval(&x);
            if let (Ok(a), Ok(b)) = (a, b) {
                if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
                    return Err(RegionCheckError::Mismatch(format!(
                        "map first component and region f disagree at {x:?}: {a} vs {b}"
                    )));
                }
            }
        }
        let bundle = JacobianBundle::new(map);
        let cofactor_n = bundle.cofactor_field(spec.dim);
        let m: Vec<Vec<Expr>> = spec
            .volume
            .iter()
            .map(|c| (1..=spec.dim).map(|j| c.diff(j)).collect())
            .collect();
        let volume_jacobian = det_expr(&m);
        let params = spec.dim - 1;
        let patch_tangents = spec
            .patches
            .iter()
            .map(|p| {
                (1..=params)
                    .map(|j| p.comps.iter().map(|c| c.diff(j)).collect())
                    .collect()
            })
            .collect();
        let lfixed = LFixedMesh::build(spec)?;
        Ok(Engine {
            spec,
            map,
            bundle,
            cofactor_n,
            volume_jacobian,
            patch_tangents,
            lfixed,
        })
    }

    /// f_n V_n at a space point.
    fn flux_field(&self, x: &[f64]) -> Result<Vec<f64>, RegionCheckError> {
        let fn_val = self
            .map
            .component(self.spec.dim)
            .eval(x)
            .map_err(|e| RegionCheckError::Eval(format!("component: {e}")))?;
        self.cofactor_n
            .iter()
            .map(|c| {
                c.eval(x)
                    .map(|v| fn_val * v)
                    .map_err(|e| RegionCheckError::Eval(format!("cofactor: {e}")))
            })
            .collect()
    }

    fn normal_at(&self, patch_index: usize, args: &[f64]) -> Result<Vec<f64>, RegionCheckError> {
        let cols = &self.patch_tangents[patch_index];
        let mut tangents = Vec::with_capacity(cols.len());
        for col in cols {
            let mut t = Vec::with_capacity(col.len());
            for c in col {
                t.push(
                    c.eval(args)
                        .map_err(|e| RegionCheckError::Eval(format!("tangent: {e}")))?,
                );
            }
            tangents.push(t);
        }
        Ok(raw_normal(&tangents))
    }

    fn orientation_sign(&self, patch_index: usize, k: f64) -> Result<f64, RegionCheckError> {
        let patch = &self.spec.patches[patch_index];
        let params = self.spec.dim - 1;
        let mut args = vec![0.5; params];
        if patch.role != PatchRole::LFixed {
            args.push(k);
        }
        let x = eval_chart(&patch.comps, &args)?;
        let n = self.normal_at(patch_index, &args)?;
        let d: f64 = n
            .iter()
            .zip(x.iter().zip(&self.spec.interior))
            .map(|(nv, (xv, iv))| nv * (xv - iv))
            .sum();
        if d == 0.0 {
            return Err(RegionCheckError::Mismatch(format!(
                "patch {} normal orientation is ambiguous",
                patch.name
            )));
        }
        Ok(d.signum())
    }

    /// Signed (or absolute) flux of f_n V_n through one patch.
    fn patch_flux(
        &self,
        patch_index: usize,
        k: f64,
        absolute: bool,
    ) -> Result<f64, RegionCheckError> {
        let patch = &self.spec.patches[patch_index];
        let params = self.spec.dim - 1;
        let with_k = patch.role != PatchRole::LFixed;
        let sign = if absolute {
            1.0
        } else {
            self.orientation_sign(patch_index, k)?
        };
        let g = |t: &[f64]| -> Option<f64> {
            let mut args = t.to_vec();
            if with_k {
                args.push(k);
            }
            let x = eval_chart(&patch.comps, &args).ok()?;
            let n = self.normal_at(patch_index, &args).ok()?;
            let gv = self.flux_field(&x).ok()?;
            let dot: f64 = gv.iter().zip(&n).map(|(a, b)| a * b).sum();
            Some(if absolute { dot.abs() } else { sign * dot })
        };
        Ok(adaptive_cube(&g, params, QUAD_REL_TOL)?.value)
    }

    fn volume_integral(&self, integrand: &Integrand, k: f64) -> Result<f64, RegionCheckError> {
        let g = |t: &[f64]| -> Option<f64> {
            let mut args = t.to_vec();
            args.push(k);
            let x = eval_chart(&self.spec.volume, &args).ok()?;
            let j = self.volume_jacobian.eval(&args).ok()?;
            let h = match integrand {
                Integrand::One => 1.0,
                Integrand::Det => self.bundle.det_at(&x).ok()?,
                Integrand::Custom(e) => e.eval(&x).ok()?,
            };
            Some(h * j.abs())
        };
        Ok(adaptive_cube(&g, self.spec.dim, QUAD_REL_TOL)?.value)
    }
}

pub fn check_region(
    map: &SmoothMap,
    spec: &RegionSpec,
    integrand: &Integrand,
    k_ladder: &[f64],
) -> Result<RegionReport, RegionCheckError> {
    assert!(k_ladder.len() >= 3, "trend needs at least 3 ladder points");
    let engine = Engine::new(map, spec)?;
    let params = spec.dim - 1;
    let sample_grid = unit_grid(params, 9);

    let mut flux_bound_m = 0.0;
    for (i, p) in spec.patches.iter().enumerate() {
        if p.role == PatchRole::LFixed {
            flux_bound_m += engine.patch_flux(i, 0.0, true)?;
        }
    }

    let mut rows = Vec::new();
    let mut s_values = Vec::new();
    let mut containment_max: f64 = 0.0;
    for (ki, &k) in k_ladder.iter().enumerate() {
        // A custom density must be nonnegative for the trend to mean
        // anything; det and the constant are exempt by construction.
        if let Integrand::Custom(h) = integrand {
            for t in unit_grid(spec.dim, 5) {
                let mut args = t.clone();
                args.push(k);
                let x = eval_chart(&spec.volume, &args)?;
                let v = h
                    .eval(&x)
                    .map_err(|e| RegionCheckError::Eval(format!("integrand: {e}")))?;
                if v < -1e-12 {
                    return Err(RegionCheckError::NegativeH { point: x, value: v });
                }
            }
        }
        let s_value = engine.volume_integral(integrand, k)?;
        s_values.push(s_value);
        let det_integral = match integrand {
            Integrand::Det => s_value,
            _ => engine.volume_integral(&Integrand::Det, k)?,
        };

        let mut q_flux = 0.0;
        let mut l_flux = 0.0;
        let mut patch_fluxes = Vec::new();
        let mut q_dev: f64 = 0.0;
        let mut q_tangency: f64 = 0.0;
        for (i, patch) in spec.patches.iter().enumerate() {
            match patch.role {
                PatchRole::Q => {
                    let fl = engine.patch_flux(i, k, false)?;
                    q_flux += fl;
                    patch_fluxes.push(PatchFluxRow {
                        name: patch.name.clone(),
                        role: patch.role,
                        flux: fl,
                    });
                    let mut reference = None;
                    for t in &sample_grid {
                        let mut args = t.clone();
                        args.push(k);
                        let x = eval_chart(&patch.comps, &args)?;
                        let v = spec
                            .leaf_fn
                            .eval(&x)
                            .map_err(|e| RegionCheckError::Eval(format!("leaf fn: {e}")))?;
                        let r = *reference.get_or_insert(v);
                        q_dev = q_dev.max((v - r).abs() / (1.0 + r.abs()));
                        let n = engine.normal_at(i, &args)?;
                        let field: Result<Vec<f64>, _> = engine
                            .cofactor_n
                            .iter()
                            .map(|c| {
                                c.eval(&x).map_err(|e| {
                                    RegionCheckError::Eval(format!("cofactor: {e}"))
                                })
                            })
                            .collect();
                        let field = field?;
                        let denom = norm(&field) * norm(&n);
                        if denom > 0.0 {
                            let dot: f64 = field.iter().zip(&n).map(|(a, b)| a * b).sum();
                            q_tangency = q_tangency.max(dot.abs() / denom);
                        }
                    }
                }
                PatchRole::L => {
                    let fl = engine.patch_flux(i, k, false)?;
                    l_flux += fl;
                    patch_fluxes.push(PatchFluxRow {
                        name: patch.name.clone(),
                        role: patch.role,
                        flux: fl,
                    });
                    for t in &sample_grid {
                        let mut args = t.clone();
                        args.push(k);
                        let x = eval_chart(&patch.comps, &args)?;
                        containment_max = containment_max.max(engine.lfixed.distance(&x));
                    }
                }
                PatchRole::LFixed => {}
            }
        }

        let mut constraint_min = f64::INFINITY;
        let mut nesting_pass = true;
        if !spec.constraints.is_empty() {
            let next_k = k_ladder.get(ki + 1).copied();
            for t in unit_grid(spec.dim, 7) {
                let mut args = t.clone();
                args.push(k);
                let x = eval_chart(&spec.volume, &args)?;
                let mut xa = x;
                xa.push(k);
                for c in &spec.constraints {
                    let v = c
                        .eval(&xa)
                        .map_err(|e| RegionCheckError::Eval(format!("constraint: {e}")))?;
                    constraint_min = constraint_min.min(v);
                }
                // the exhaustion must nest: this rung's points belong to
                // the next rung too
                if let Some(nk) = next_k {
                    let last = xa.len() - 1;
                    xa[last] = nk;
                    for c in &spec.constraints {
                        let v = c
                            .eval(&xa)
                            .map_err(|e| RegionCheckError::Eval(format!("constraint: {e}")))?;
                        if v < -CONSTRAINT_SLACK {
                            nesting_pass = false;
                        }
                    }
                }
            }
        }

        let scale = 1.0 + det_integral.abs();
        let closure_error = (det_integral - (q_flux + l_flux)).abs() / scale;
        rows.push(KRow {
            k,
            s_value,
            det_integral,
            q_flux,
            l_flux,
            patch_fluxes,
            closure_error,
            closure_pass: closure_error <= CLOSURE_TOL,
            q_constancy_dev: q_dev,
            q_constancy_pass: q_dev <= Q_LEAF_TOL,
            q_tangency_max: q_tangency,
            q_tangency_pass: q_tangency <= TANGENCY_RESID_TOL,
            q_flux_pass: q_flux.abs() <= Q_FLUX_TOL * scale,
            l_bound_pass: l_flux.abs() <= flux_bound_m + FLUX_SLACK * (1.0 + flux_bound_m),
            constraint_min,
            constraint_pass: constraint_min >= -CONSTRAINT_SLACK,
            nesting_pass,
        });
    }

    let mut corner_max_miss: f64 = 0.0;
    let mut corners_pass = true;
    for corner in &spec.corners {
        for &k in k_ladder {
            let target: Result<Vec<f64>, _> = corner.iter().map(|c| c.eval(&[k])).collect();
            let target = target.map_err(|e| RegionCheckError::Eval(format!("corner: {e}")))?;
            let mut best = f64::INFINITY;
            for patch in &spec.patches {
                let with_k = patch.role != PatchRole::LFixed;
                for t in boundary_grid(params, 17) {
                    let mut args = t.clone();
                    if with_k {
                        args.push(k);
                    }
                    let x = eval_chart(&patch.comps, &args)?;
                    best = best.min(dist(&x, &target));
                }
            }
            corner_max_miss = corner_max_miss.max(best);
            if best > CORNER_TOL * (1.0 + norm(&target)) {
                corners_pass = false;
            }
        }
    }

    let trend = classify_trend(k_ladder, &s_values);
    let containment_pass = containment_max <= CONTAIN_TOL;
    let structure_pass = rows.iter().all(|r| {
        r.closure_pass
            && r.q_constancy_pass
            && r.q_tangency_pass
            && r.q_flux_pass
            && r.l_bound_pass
            && r.constraint_pass
            && r.nesting_pass
    }) && corners_pass
        && containment_pass;

    Ok(RegionReport {
        name: spec.name.clone(),
        dim: spec.dim,
        integrand: integrand.label(),
        flux_bound_m,
        rows,
        corner_max_miss,
        corners_pass,
        containment_max_dist: containment_max,
        containment_pass,
        trend,
        structure_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::geom::AxisBox;

    const SQUARE: &str = "\
name = unit_square
dim = 2
f = x1
interior = 0.5, 0.5
volume = t1; t2
qpatch right = 1; t1
lpatch top = t1; 1
lpatch bottom = t1; 0
lpatch left = 0; t1
lfixed top = t1; 1
lfixed bottom = t1; 0
lfixed left = 0; t1
corner = 1; 1
corner = 1; 0
";

    fn identity2() -> SmoothMap {
        SmoothMap::new(
            "identity2",
            vec![parse("x1").unwrap(), parse("x2").unwrap()],
            AxisBox::new(vec![-2.0, -2.0], vec![2.0, 2.0]),
        )
        .unwrap()
    }

    #[test]
    fn parse_unit_square() {
        let spec = parse_region(SQUARE).unwrap();
        assert_eq!(spec.name, "unit_square");
        assert_eq!(spec.dim, 2);
        assert_eq!(spec.patches.len(), 7);
        assert_eq!(spec.corners.len(), 2);
    }

    #[test]
    fn unit_square_structure_closes() {
        let spec = parse_region(SQUARE).unwrap();
        let rep =
            check_region(&identity2(), &spec, &Integrand::One, &[2.0, 4.0, 8.0, 16.0]).unwrap();
        assert!(rep.structure_pass, "{rep:?}");
        for row in &rep.rows {
            assert!((row.s_value - 1.0).abs() < 1e-9);
            assert!((row.det_integral - 1.0).abs() < 1e-9);
            assert!(row.q_flux.abs() < 1e-9);
            assert!((row.l_flux - 1.0).abs() < 1e-6);
        }
        assert!((rep.flux_bound_m - 1.0).abs() < 1e-6);
        assert_eq!(rep.trend.verdict, TrendVerdict::Convergent);
        assert!((rep.trend.recip_limit - 1.0).abs() < 1e-9);
    }

    #[test]
    fn broken_region_fails_constancy() {
        // Q patch moved to the top edge, where f = x1 is not constant
        let bad = SQUARE
            .replace("qpatch right = 1; t1", "qpatch top2 = t1; 1")
            .replace("lpatch top = t1; 1", "lpatch right = 1; t1");
        let spec = parse_region(&bad).unwrap();
        let rep = check_region(&identity2(), &spec, &Integrand::One, &[2.0, 4.0, 8.0]).unwrap();
        assert!(!rep.structure_pass);
        assert!(rep.rows.iter().any(|r| !r.q_constancy_pass));
    }

    #[test]
    fn missing_pieces_rejected() {
        assert!(matches!(
            parse_region("dim = 2\nname = x\n"),
            Err(RegionError::Invalid(_))
        ));
        let e = parse_region("name = y\ndim = 2\nvolume = t1; t2; t1\n");
        assert!(matches!(e, Err(RegionError::Syntax { .. })));
    }

    #[test]
    fn trend_discrimination() {
        let ks: Vec<f64> = (1..=8).map(|j| 2f64.powi(j)).collect();
        let log_data: Vec<f64> = ks.iter().map(|k| k.ln() + 0.42 / k - 0.13).collect();
        assert_eq!(
            classify_trend(&ks, &log_data).verdict,
            TrendVerdict::Divergent
        );
        let recip_data: Vec<f64> = ks.iter().map(|k| 0.5 - 0.42 / k).collect();
        let t = classify_trend(&ks, &recip_data);
        assert_eq!(t.verdict, TrendVerdict::Convergent);
        assert!((t.recip_limit - 0.5).abs() < 1e-12);
    }
}
