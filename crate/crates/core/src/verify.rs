//! Quantitative checks on flow traces and the double-point census of
//! projected curves.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::angle_between;
use crate::flow::{FlowMode, IsotopyTrace};
use crate::geometry::{estimate_tangent_frame, EmbeddedManifold, GeometryError};
use crate::Vector;

/// Slack allowed on bounds that the continuous construction meets exactly.
pub const BOUND_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("rise rate is only defined for the unmodified global flow, got a {0} trace")]
    WrongMode(&'static str),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One checked bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantEntry {
    pub name: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    /// What the bound asserts.
    pub property: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub entries: Vec<InvariantEntry>,
    pub overall: bool,
}

impl InvariantReport {
    pub fn new(entries: Vec<InvariantEntry>) -> Self {
        let overall = entries.iter().all(|e| e.pass);
        Self { entries, overall }
    }

    pub fn push(&mut self, entry: InvariantEntry) {
        self.overall &= entry.pass;
        self.entries.push(entry);
    }

    pub fn extend(&mut self, other: InvariantReport) {
        for e in other.entries {
            self.push(e);
        }
    }

    pub fn get(&self, name: &str) -> Option<&InvariantEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Plain-text table, one row per entry.
    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>14}  {:>14}  result", "name", "measured", "bound");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {}",
                e.name,
                e.measured,
                e.bound,
                if e.pass { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "overall: {}", if self.overall { "pass" } else { "FAIL" });
        out
    }
}

fn entry(name: &str, measured: f64, bound: f64, pass: bool, property: &str) -> InvariantEntry {
    InvariantEntry {
        name: name.to_string(),
        measured,
        bound,
        pass,
        property: property.to_string(),
    }
}

fn vertical_index(trace: &IsotopyTrace) -> usize {
    trace.split.vertical_index()
}

/// Smallest rate of climb over samples and steps of a global-flow trace.
pub fn check_rise_rate(
    trace: &IsotopyTrace,
    epsilon: f64,
    mu: f64,
) -> Result<InvariantEntry, VerifyError> {
    if trace.mode() != FlowMode::Global {
        return Err(VerifyError::WrongMode(trace.mode().as_str()));
    }
    let vi = vertical_index(trace);
    let mut measured = trace.stats.min_rise;
    for w in trace.snapshots.windows(2) {
        let dt = w[1].t - w[0].t;
        for (a, b) in w[0].positions.iter().zip(&w[1].positions) {
            measured = measured.min((b[vi] - a[vi]) / dt);
        }
    }
    let bound = (epsilon - mu).sin() - BOUND_TOL;
    Ok(entry(
        "rise_rate",
        measured,
        bound,
        measured >= bound,
        "every point climbs at least at rate sin(eps - mu) in the global flow",
    ))
}

/// Largest speed over samples and steps.
pub fn check_speed(trace: &IsotopyTrace) -> InvariantEntry {
    let mut measured = trace.stats.max_speed;
    for w in trace.snapshots.windows(2) {
        let dt = w[1].t - w[0].t;
        for (a, b) in w[0].positions.iter().zip(&w[1].positions) {
            measured = measured.max((b - a).norm() / dt);
        }
    }
    let bound = std::f64::consts::SQRT_2 + BOUND_TOL;
    entry(
        "speed",
        measured,
        bound,
        measured <= bound,
        "points of the modified flow move with speed below sqrt(2)",
    )
}

/// Largest distance any sample ends up from where it started.
pub fn check_displacement(initial: &[Vector], last: &[Vector], budget: f64) -> InvariantEntry {
    let measured = max_displacement(initial, last);
    entry(
        "displacement",
        measured,
        budget,
        measured < budget,
        "every point moves less than the displacement budget",
    )
}

pub fn max_displacement(initial: &[Vector], last: &[Vector]) -> f64 {
    initial
        .iter()
        .zip(last)
        .map(|(a, b)| (b - a).norm())
        .fold(0.0, f64::max)
}

/// Smallest angle between carried field and tangent space, and its value at
/// the first snapshot.
pub fn normality_margins(trace: &IsotopyTrace) -> Result<(f64, f64), VerifyError> {
    let mut overall = f64::INFINITY;
    let mut initial = f64::INFINITY;
    for (k, s) in trace.snapshots.iter().enumerate() {
        let m = trace.manifold_at(k)?;
        let t = estimate_tangent_frame(&m)?;
        let worst = s
            .carried
            .iter()
            .enumerate()
            .map(|(i, c)| t.angle_to_tangent(i, c))
            .fold(f64::INFINITY, f64::min);
        if k == 0 {
            initial = worst;
        }
        overall = overall.min(worst);
    }
    Ok((overall, initial))
}

/// The carried field never becomes tangent, and starts at least
/// `mu - smoothing` away from the tangent space.
pub fn check_normality(
    trace: &IsotopyTrace,
    mu: f64,
    smoothing: f64,
) -> Result<Vec<InvariantEntry>, VerifyError> {
    let (overall, initial) = normality_margins(trace)?;
    let bound = mu - smoothing - 1e-6;
    Ok(vec![
        entry(
            "normality_initial",
            initial,
            bound,
            initial >= bound,
            "the rotated field makes an angle of at least mu with M",
        ),
        entry(
            "normality_throughout",
            overall,
            0.0,
            overall > 0.0,
            "the carried field stays normal to M throughout the flow",
        ),
    ])
}

/// Drops every vertical coordinate, leaving the `Q` part.
pub fn q_part(v: &Vector, split: crate::geometry::AmbientSplit) -> Vector {
    v.rows(0, split.q).into_owned()
}

/// Smallest singular value over samples of the tangent basis projected to
/// `Q`.
pub fn immersion_ratio(m: &EmbeddedManifold) -> Result<f64, VerifyError> {
    let t = estimate_tangent_frame(m)?;
    let split = m.split();
    let mut worst = f64::INFINITY;
    for i in 0..m.len() {
        let cols: Vec<Vector> = t.basis(i).iter().map(|b| q_part(b, split)).collect();
        let mat = nalgebra::DMatrix::from_columns(&cols);
        let s = mat.singular_values().iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.min(s);
    }
    Ok(worst)
}

/// The vertical projection of `m` is an immersion with margin `tol`.
pub fn check_immersion(m: &EmbeddedManifold, tol: f64) -> Result<InvariantEntry, VerifyError> {
    let measured = immersion_ratio(m)?;
    Ok(entry(
        "immersion",
        measured,
        tol,
        measured >= tol,
        "the compressed embedding projects to an immersion in Q",
    ))
}

/// Result of the double-point census of a planar polyline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DoublePoints {
    pub count: usize,
    /// Segment pairs meeting at an angle below the transversality tolerance.
    pub non_transverse: Vec<(usize, usize, f64)>,
    /// Groups of three or more crossings at one point.
    pub triple_points: usize,
}

/// Crossing of segments `i` and `j` with parameters in `[0, 1)`, where the
/// last segment of an open polyline is closed at its end.
fn crossing(
    pts: &[[f64; 2]],
    segs: &[[usize; 2]],
    i: usize,
    j: usize,
    closed: bool,
) -> Option<([f64; 2], f64)> {
    let [a0, a1] = segs[i];
    let [b0, b1] = segs[j];
    let (p, r) = (pts[a0], [pts[a1][0] - pts[a0][0], pts[a1][1] - pts[a0][1]]);
    let (q, s) = (pts[b0], [pts[b1][0] - pts[b0][0], pts[b1][1] - pts[b0][1]]);
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom == 0.0 {
        return None;
    }
    let qp = [q[0] - p[0], q[1] - p[1]];
    let t = (qp[0] * s[1] - qp[1] * s[0]) / denom;
    let u = (qp[0] * r[1] - qp[1] * r[0]) / denom;
    let last = segs.len() - 1;
    let inside = |x: f64, k: usize| x >= 0.0 && (x < 1.0 || (!closed && k == last && x <= 1.0));
    if !(inside(t, i) && inside(u, j)) {
        return None;
    }
    let rn = (r[0] * r[0] + r[1] * r[1]).sqrt();
    let sn = (s[0] * s[0] + s[1] * s[1]).sqrt();
    let angle = (denom.abs() / (rn * sn)).asin();
    Some(([p[0] + t * r[0], p[1] + t * r[1]], angle))
}

fn segments_share_vertex(a: [usize; 2], b: [usize; 2]) -> bool {
    a[0] == b[0] || a[0] == b[1] || a[1] == b[0] || a[1] == b[1]
}

/// Counts crossings between non-adjacent segments of a planar polyline by
/// sweeping along the first coordinate.
pub fn count_double_points(pts: &[[f64; 2]], closed: bool, transverse_tol: f64) -> DoublePoints {
    let n = pts.len();
    let mut segs: Vec<[usize; 2]> = (0..n.saturating_sub(1)).map(|i| [i, i + 1]).collect();
    if closed && n > 2 {
        segs.push([n - 1, 0]);
    }
    let span = |s: &[usize; 2]| {
        let (a, b) = (pts[s[0]][0], pts[s[1]][0]);
        (a.min(b), a.max(b))
    };
    let mut order: Vec<usize> = (0..segs.len()).collect();
    order.sort_by(|&a, &b| span(&segs[a]).0.total_cmp(&span(&segs[b]).0).then(a.cmp(&b)));
    let mut active: Vec<usize> = Vec::new();
    let mut out = DoublePoints::default();
    let mut points: Vec<[f64; 2]> = Vec::new();
    for &i in &order {
        let (lo, _) = span(&segs[i]);
        active.retain(|&j| span(&segs[j]).1 >= lo);
        for &j in &active {
            if segments_share_vertex(segs[i], segs[j]) {
                continue;
            }
            let (a, b) = (i.min(j), i.max(j));
            if let Some((x, angle)) = crossing(pts, &segs, a, b, closed) {
                out.count += 1;
                points.push(x);
                if angle < transverse_tol {
                    out.non_transverse.push((a, b, angle));
                }
            }
        }
        active.push(i);
    }
    let scale = pts
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let tol = 1e-9 * scale;
    let mut used = vec![false; points.len()];
    for a in 0..points.len() {
        if used[a] {
            continue;
        }
        let group: Vec<usize> = (a..points.len())
            .filter(|&b| {
                !used[b] && (points[a][0] - points[b][0]).hypot(points[a][1] - points[b][1]) <= tol
            })
            .collect();
        if group.len() >= 3 {
            out.triple_points += 1;
        }
        for b in group {
            used[b] = true;
        }
    }
    out.non_transverse.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    out
}

/// Double points of the projection to `Q` of a curve, when `Q` is a plane;
/// `None` for surfaces or other dimensions of `Q`.
pub fn projected_double_points(m: &EmbeddedManifold, transverse_tol: f64) -> Option<DoublePoints> {
    let closed = match m.topology() {
        crate::geometry::Topology::Polyline { closed } => closed,
        _ => return None,
    };
    if m.split().q != 2 {
        return None;
    }
    let pts: Vec<[f64; 2]> = m.positions().iter().map(|p| [p[0], p[1]]).collect();
    Some(count_double_points(&pts, closed, transverse_tol))
}

/// Everything `verify_run` needs besides the traces; stored with them so a
/// replay reproduces the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyParams {
    pub epsilon_angle: f64,
    pub mu: f64,
    pub smoothing: f64,
    #[serde(default)]
    pub epsilon_budget: Option<f64>,
    pub immersion_tol: f64,
    /// Largest admissible final angle between the carried field and its axis.
    pub alignment_tol: f64,
    /// Samples in `V ∪ U`; the local run should move mostly there.
    #[serde(default)]
    pub focus: Option<Vec<bool>>,
    /// Samples of the relative region.
    #[serde(default)]
    pub fixed: Option<Vec<bool>>,
}

/// Share of the total sample displacement taking place on `focus`.
pub fn concentration(displacements: &[f64], focus: &[bool]) -> f64 {
    let total: f64 = displacements.iter().sum();
    if total == 0.0 {
        return 1.0;
    }
    let inside: f64 = displacements
        .iter()
        .zip(focus)
        .filter(|(_, &f)| f)
        .map(|(d, _)| d)
        .sum();
    inside / total
}

/// Checks every stage of a run. Stage entries are prefixed with the stage
/// name; run-level entries compare the first and last snapshots overall.
pub fn verify_run(stages: &[IsotopyTrace], params: &VerifyParams) -> Result<InvariantReport, VerifyError> {
    let mut report = InvariantReport::default();
    report.overall = true;
    let (Some(first), Some(last)) = (stages.first(), stages.last()) else {
        return Ok(report);
    };
    for (k, stage) in stages.iter().enumerate() {
        let prefix = format!("{}:{}", k, stage.name);
        let rename = |mut e: InvariantEntry| {
            e.name = format!("{prefix}.{}", e.name);
            e
        };
        if stage.mode() == FlowMode::Global {
            report.push(rename(check_rise_rate(stage, params.epsilon_angle, params.mu)?));
        } else {
            report.push(rename(check_speed(stage)));
        }
        let (mu, smoothing) = if k == 0 {
            (params.mu, params.smoothing)
        } else {
            (0.0, 0.0)
        };
        for e in check_normality(stage, mu, smoothing)? {
            report.push(rename(e));
        }
        let up = stage.split.up();
        let align = stage
            .last()
            .carried
            .iter()
            .map(|c| angle_between(c, &up))
            .fold(0.0, f64::max);
        report.push(rename(entry(
            "alignment",
            align,
            params.alignment_tol,
            align <= params.alignment_tol,
            "at the end of the stage the carried field points along its axis",
        )));
    }
    let initial = &first.first().positions;
    let fin = &last.last().positions;
    if let Some(budget) = params.epsilon_budget {
        report.push(check_displacement(initial, fin, budget));
    }
    let displacements: Vec<f64> = initial.iter().zip(fin).map(|(a, b)| (b - a).norm()).collect();
    if let Some(focus) = &params.focus {
        let share = concentration(&displacements, focus);
        report.push(entry(
            "concentration",
            share,
            0.95,
            share >= 0.95,
            "nearly all movement happens near the downset and horizontal set",
        ));
    }
    if let Some(fixed) = &params.fixed {
        let moved = displacements
            .iter()
            .zip(fixed)
            .filter(|(_, &f)| f)
            .map(|(d, _)| *d)
            .fold(0.0, f64::max);
        report.push(entry(
            "relative_fixed",
            moved,
            1e-6,
            moved < 1e-6,
            "the isotopy is fixed on the relative region",
        ));
    }
    let final_m = last.final_manifold()?;
    if last.converged && final_m.ambient_dim() > final_m.manifold_dim() {
        report.push(check_immersion(&final_m, params.immersion_tol)?);
    }
    Ok(report)
}
