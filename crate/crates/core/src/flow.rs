//! Time integration of the flows that straighten the field.
//!
//! Three modes share one fixed-step RK4 driver:
//!
//! * `Global`: `x' = γ(x)`, the carried field is `γ` at the current point.
//! * `Modified`: `x' = γ(x + t u) - u`, stationary wherever the translated
//!   field is vertical; the carried field is `γ(x + t u)`.
//! * `Phased`: the modified field multiplied by a bump `ρ(t)` that is 1 up to
//!   `ω` and 0 from `2ω` on.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{angle_between, rotate_with, AmbientField, FieldError, NormalFrame};
use crate::geometry::{estimate_tangent_frame, AmbientSplit, EmbeddedManifold, GeometryError, Topology};
use crate::smooth;
use crate::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMode {
    Global,
    Modified,
    Phased,
}

impl FlowMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FlowMode::Global => "global",
            FlowMode::Modified => "modified",
            FlowMode::Phased => "phased",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub h: f64,
    pub t_max: f64,
    pub mode: FlowMode,
    /// Phase-out time; required in phased mode.
    #[serde(default)]
    pub omega: Option<f64>,
    /// Stop once every carried vector is this close to `u` (radians).
    pub verticality_tol: f64,
    pub record_every: usize,
    /// Samples held fixed throughout (the relative region).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fixed: Vec<bool>,
}

impl FlowConfig {
    pub fn new(mode: FlowMode, h: f64, t_max: f64) -> Self {
        Self {
            h,
            t_max,
            mode,
            omega: None,
            verticality_tol: 1e-3,
            record_every: 10,
            fixed: Vec::new(),
        }
    }

    fn validate(&self, samples: usize) -> Result<(), FlowError> {
        if !(self.h > 0.0) || !(self.t_max >= self.h) {
            return Err(FlowError::InvalidConfig(format!(
                "need h > 0 and t_max >= h, got h = {}, t_max = {}",
                self.h, self.t_max
            )));
        }
        if self.mode == FlowMode::Phased && !self.omega.is_some_and(|w| w > 0.0) {
            return Err(FlowError::InvalidConfig("phased mode needs omega > 0".into()));
        }
        if !self.fixed.is_empty() && self.fixed.len() != samples {
            return Err(FlowError::InvalidConfig(format!(
                "fixed mask has {} entries for {samples} samples",
                self.fixed.len()
            )));
        }
        Ok(())
    }

    fn is_fixed(&self, i: usize) -> bool {
        self.fixed.get(i).copied().unwrap_or(false)
    }
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid flow configuration: {0}")]
    InvalidConfig(String),
    #[error("verticality tolerance not met by t = {}", .0.final_time())]
    NotConverged(Box<IsotopyTrace>),
    #[error("malformed trace: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One recorded state of the flow.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub t: f64,
    pub positions: Vec<Vector>,
    /// The field carried by the flow.
    pub carried: Vec<Vector>,
    /// Further normal fields transported along (multi-field runs).
    pub extra: Vec<Vec<Vector>>,
}

/// Per-step measurements, taken at every step rather than only at recorded
/// snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub steps: usize,
    /// Largest `|Δx| / h` over samples and steps.
    pub max_speed: f64,
    /// Smallest `Δheight / h` over samples and steps.
    pub min_rise: f64,
    /// Largest angle the carried vector of a sample turns through in one step.
    pub max_rotation: f64,
}

impl Default for StepStats {
    fn default() -> Self {
        Self {
            steps: 0,
            max_speed: 0.0,
            min_rise: f64::INFINITY,
            max_rotation: 0.0,
        }
    }
}

/// The recorded isotopy of one flow run.
#[derive(Debug, Clone, PartialEq)]
pub struct IsotopyTrace {
    pub name: String,
    pub config: FlowConfig,
    pub topology: Topology,
    pub params: Vec<Vec<f64>>,
    pub split: AmbientSplit,
    pub snapshots: Vec<Snapshot>,
    pub stats: StepStats,
    pub converged: bool,
}

impl IsotopyTrace {
    pub fn mode(&self) -> FlowMode {
        self.config.mode
    }

    pub fn first(&self) -> &Snapshot {
        &self.snapshots[0]
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("trace has a first snapshot")
    }

    pub fn final_time(&self) -> f64 {
        self.last().t
    }

    pub fn manifold_at(&self, k: usize) -> Result<EmbeddedManifold, GeometryError> {
        EmbeddedManifold::from_parts(
            self.topology,
            self.params.clone(),
            self.snapshots[k].positions.clone(),
            self.split,
            None,
        )
    }

    pub fn final_manifold(&self) -> Result<EmbeddedManifold, GeometryError> {
        self.manifold_at(self.snapshots.len() - 1)
    }

    /// Carried field and extras of the last snapshot as a frame.
    pub fn final_frame(&self) -> Result<NormalFrame, FieldError> {
        let last = self.last();
        let vectors = (0..last.carried.len())
            .map(|i| {
                std::iter::once(last.carried[i].clone())
                    .chain(last.extra.iter().map(|f| f[i].clone()))
                    .collect()
            })
            .collect();
        NormalFrame::new(vectors, false)
    }

    /// `|final - initial|` per sample.
    pub fn displacements(&self) -> Vec<f64> {
        self.first()
            .positions
            .iter()
            .zip(&self.last().positions)
            .map(|(a, b)| (b - a).norm())
            .collect()
    }
}

/// One classical RK4 step of `x' = f(x, t)`.
pub fn rk4_step<E>(
    x: &Vector,
    t: f64,
    h: f64,
    f: impl Fn(&Vector, f64) -> Result<Vector, E>,
) -> Result<Vector, E> {
    let k1 = f(x, t)?;
    let k2 = f(&(x + &k1 * (h / 2.0)), t + h / 2.0)?;
    let k3 = f(&(x + &k2 * (h / 2.0)), t + h / 2.0)?;
    let k4 = f(&(x + &k3 * h), t + h)?;
    Ok(x + (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0))
}

/// One RK4 step of the global flow `x' = γ(x)`. `anchor` names the sample
/// the point belongs to (used by immersed owners).
pub fn step_global(
    x: &Vector,
    field: &AmbientField,
    h: f64,
    anchor: usize,
) -> Result<Vector, FieldError> {
    rk4_step(x, 0.0, h, |y, _| field.eval_for(y, anchor))
}

fn translated(x: &Vector, up: &Vector, t: f64) -> Vector {
    x + up * t
}

/// Velocity of the modified flow, `ρ(t) (γ(x + t u) - u)`; exactly zero when
/// `ρ(t) = 0`.
fn modified_velocity(
    x: &Vector,
    t: f64,
    field: &AmbientField,
    rho_omega: Option<f64>,
    anchor: usize,
) -> Result<Vector, FieldError> {
    let rho = rho_omega.map_or(1.0, |w| smooth::phase_out(t, w));
    if rho == 0.0 {
        return Ok(Vector::zeros(x.len()));
    }
    let up = field.up();
    let g = field.eval_for(&translated(x, up, t), anchor)?;
    let v = g - up;
    Ok(if rho == 1.0 { v } else { v * rho })
}

/// One RK4 step of the modified flow at time `t`, optionally phased out
/// with parameter `ω`.
pub fn step_modified(
    x: &Vector,
    t: f64,
    field: &AmbientField,
    h: f64,
    rho_omega: Option<f64>,
    anchor: usize,
) -> Result<Vector, FieldError> {
    rk4_step(x, t, h, |y, s| modified_velocity(y, s, field, rho_omega, anchor))
}

/// Flows every sample of `m` and records the trace.
///
/// The carried field is derived from `field`; fields `1..` of `frame`, if
/// any, are transported by re-orthonormalising against the tangent space and
/// the carried field after every step.
pub fn integrate(
    m: &EmbeddedManifold,
    frame: &NormalFrame,
    field: &AmbientField,
    cfg: &FlowConfig,
) -> Result<IsotopyTrace, FlowError> {
    cfg.validate(m.len())?;
    if frame.len() != m.len() {
        return Err(FieldError::SampleCountMismatch {
            expected: m.len(),
            found: frame.len(),
        }
        .into());
    }
    let up = m.split().up();
    let rho_omega = match cfg.mode {
        FlowMode::Phased => cfg.omega,
        _ => None,
    };
    // the carried field stops changing once ρ has vanished
    let carry_time = |t: f64| match rho_omega {
        Some(w) => t.min(2.0 * w),
        None => t,
    };
    let carried_at = |positions: &[Vector], t: f64| -> Result<Vec<Vector>, FieldError> {
        positions
            .iter()
            .enumerate()
            .map(|(i, x)| match cfg.mode {
                FlowMode::Global => field.eval_for(x, i),
                _ => field.eval_for(&translated(x, &up, carry_time(t)), i),
            })
            .collect()
    };
    let vertical = |carried: &[Vector]| {
        carried
            .iter()
            .all(|c| angle_between(c, &up) <= cfg.verticality_tol)
    };

    let mut positions = m.positions().to_vec();
    let mut carried = carried_at(&positions, 0.0)?;
    let mut extra: Vec<Vec<Vector>> = (1..frame.k()).map(|j| frame.field(j)).collect();
    if !extra.is_empty() {
        turn_with(&frame.field(0), &carried, &mut extra);
        transport(m, &positions, &carried, &mut extra)?;
    }
    let mut stats = StepStats::default();
    let mut snapshots = vec![Snapshot {
        t: 0.0,
        positions: positions.clone(),
        carried: carried.clone(),
        extra: extra.clone(),
    }];
    let mut t = 0.0;
    let mut step = 0usize;
    let mut converged = vertical(&carried);
    let vi = m.split().vertical_index();
    while !converged && t + 0.5 * cfg.h <= cfg.t_max {
        let mut next = Vec::with_capacity(positions.len());
        for (i, x) in positions.iter().enumerate() {
            if cfg.is_fixed(i) {
                next.push(x.clone());
                continue;
            }
            let y = match cfg.mode {
                FlowMode::Global => step_global(x, field, cfg.h, i)?,
                _ => step_modified(x, t, field, cfg.h, rho_omega, i)?,
            };
            let dx = &y - x;
            stats.max_speed = stats.max_speed.max(dx.norm() / cfg.h);
            stats.min_rise = stats.min_rise.min(dx[vi] / cfg.h);
            next.push(y);
        }
        step += 1;
        t = step as f64 * cfg.h;
        positions = next;
        let new_carried = carried_at(&positions, t)?;
        for (a, b) in carried.iter().zip(&new_carried) {
            stats.max_rotation = stats.max_rotation.max(angle_between(a, b));
        }
        if !extra.is_empty() {
            turn_with(&carried, &new_carried, &mut extra);
        }
        carried = new_carried;
        if !extra.is_empty() {
            transport(m, &positions, &carried, &mut extra)?;
        }
        stats.steps = step;
        converged = vertical(&carried);
        if converged || step % cfg.record_every.max(1) == 0 || t + 0.5 * cfg.h > cfg.t_max {
            snapshots.push(Snapshot {
                t,
                positions: positions.clone(),
                carried: carried.clone(),
                extra: extra.clone(),
            });
        }
    }
    let trace = IsotopyTrace {
        name: cfg.mode.as_str().to_string(),
        config: cfg.clone(),
        topology: m.topology(),
        params: m.params().to_vec(),
        split: m.split(),
        snapshots,
        stats,
        converged,
    };
    if converged {
        Ok(trace)
    } else {
        Err(FlowError::NotConverged(Box::new(trace)))
    }
}

/// Turns the extra fields with the carried field as it moves from `from` to
/// `to`.
fn turn_with(from: &[Vector], to: &[Vector], extra: &mut [Vec<Vector>]) {
    for i in 0..from.len() {
        for f in extra.iter_mut() {
            if let Some(e) = rotate_with(&from[i], &to[i], &f[i]) {
                f[i] = e;
            }
        }
    }
}

/// Projects each extra field off the tangent space, the carried field and the
/// preceding extras, then renormalises.
fn transport(
    m: &EmbeddedManifold,
    positions: &[Vector],
    carried: &[Vector],
    extra: &mut [Vec<Vector>],
) -> Result<(), FlowError> {
    let moved = m.with_positions(positions.to_vec())?;
    let tangents = estimate_tangent_frame(&moved)?;
    for i in 0..positions.len() {
        for j in 0..extra.len() {
            let mut v = tangents.normal_component(i, &extra[j][i]);
            v.axpy(-v.dot(&carried[i]), &carried[i], 1.0);
            for k in 0..j {
                let prev = extra[k][i].clone();
                v.axpy(-v.dot(&prev), &prev, 1.0);
            }
            let n = v.norm();
            if n < 1e-9 {
                return Err(FieldError::DependentField { sample: i, field: j + 1 }.into());
            }
            extra[j][i] = v / n;
        }
    }
    Ok(())
}

pub const TRACE_FORMAT: &str = "compression-trace/1";

#[derive(Debug, Serialize, Deserialize)]
struct StageHeader {
    format: String,
    name: String,
    config: FlowConfig,
    topology: Topology,
    params: Vec<Vec<f64>>,
    split: AmbientSplit,
    stats: StepStats,
    converged: bool,
    snapshots: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotRecord {
    t: f64,
    positions: Vec<Vec<f64>>,
    carried: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    extra: Vec<Vec<Vec<f64>>>,
}

fn rows(vs: &[Vector]) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.as_slice().to_vec()).collect()
}

fn vectors(rows: Vec<Vec<f64>>) -> Vec<Vector> {
    rows.into_iter().map(Vector::from_vec).collect()
}

/// Writes one stage as a header line followed by one line per snapshot.
pub fn write_trace(trace: &IsotopyTrace, out: &mut impl Write) -> Result<(), FlowError> {
    let header = StageHeader {
        format: TRACE_FORMAT.to_string(),
        name: trace.name.clone(),
        config: trace.config.clone(),
        topology: trace.topology,
        params: trace.params.clone(),
        split: trace.split,
        stats: trace.stats,
        converged: trace.converged,
        snapshots: trace.snapshots.len(),
    };
    let to_io = |e: serde_json::Error| FlowError::Malformed(e.to_string());
    writeln!(out, "{}", serde_json::to_string(&header).map_err(to_io)?)?;
    for s in &trace.snapshots {
        let rec = SnapshotRecord {
            t: s.t,
            positions: rows(&s.positions),
            carried: rows(&s.carried),
            extra: s.extra.iter().map(|f| rows(f)).collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec).map_err(to_io)?)?;
    }
    Ok(())
}

/// Reads every stage written by [`write_trace`] from `input`. Lines that are
/// not part of a stage (a leading run header, say) are returned separately.
pub fn read_traces(input: impl BufRead) -> Result<(Vec<IsotopyTrace>, Vec<String>), FlowError> {
    let mut lines = input.lines().enumerate();
    let mut stages = Vec::new();
    let mut other = Vec::new();
    while let Some((lineno, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line)
            .map_err(|e| FlowError::Malformed(format!("line {}: {e}", lineno + 1)))?;
        if value.get("format").and_then(|f| f.as_str()) != Some(TRACE_FORMAT) {
            other.push(line);
            continue;
        }
        let header: StageHeader = serde_json::from_value(value)
            .map_err(|e| FlowError::Malformed(format!("line {}: {e}", lineno + 1)))?;
        let mut snapshots = Vec::with_capacity(header.snapshots);
        for _ in 0..header.snapshots {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| FlowError::Malformed("trace ends inside a stage".into()))?;
            let rec: SnapshotRecord = serde_json::from_str(&line?)
                .map_err(|e| FlowError::Malformed(format!("line {}: {e}", lineno + 1)))?;
            if rec.positions.len() != header.params.len() || rec.carried.len() != header.params.len() {
                return Err(FlowError::Malformed(format!(
                    "line {}: snapshot size does not match the stage header",
                    lineno + 1
                )));
            }
            snapshots.push(Snapshot {
                t: rec.t,
                positions: vectors(rec.positions),
                carried: vectors(rec.carried),
                extra: rec.extra.into_iter().map(vectors).collect(),
            });
        }
        if snapshots.is_empty() {
            return Err(FlowError::Malformed("stage without snapshots".into()));
        }
        stages.push(IsotopyTrace {
            name: header.name,
            config: header.config,
            topology: header.topology,
            params: header.params,
            split: header.split,
            snapshots,
            stats: header.stats,
            converged: header.converged,
        });
    }
    Ok((stages, other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::globalize;
    use crate::geometry::{ReachOptions, TubularNeighbourhood};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn flat_line() -> EmbeddedManifold {
        let split = AmbientSplit::new(2, 1, 0).unwrap();
        let pts = (0..=20).map(|i| v(&[i as f64 * 0.05, 0.0, 0.0])).collect();
        EmbeddedManifold::polyline(pts, false, split).unwrap()
    }

    fn field_on(m: &EmbeddedManifold, beta: Vec<Vector>, nu: f64) -> AmbientField {
        let t = estimate_tangent_frame(m).unwrap();
        let tube = TubularNeighbourhood::new(m, &t, nu, ReachOptions::defaults_for(m)).unwrap();
        globalize(m, &NormalFrame::single(beta).unwrap(), &tube).unwrap()
    }

    #[test]
    fn rk4_is_exact_on_constant_field() {
        let x = v(&[0.3, -1.0, 2.0]);
        let u = v(&[0.0, 0.0, 1.0]);
        let y = rk4_step::<()>(&x, 0.0, 0.25, |_, _| Ok(u.clone())).unwrap();
        assert_eq!(y, v(&[0.3, -1.0, 2.25]));
    }

    #[test]
    fn rk4_order_on_linear_field() {
        let f = |y: &Vector, _t: f64| -> Result<Vector, ()> { Ok(v(&[-y[1], y[0]])) };
        let run = |h: f64| {
            let n = (1.0 / h).round() as usize;
            let mut x = v(&[1.0, 0.0]);
            for k in 0..n {
                x = rk4_step(&x, k as f64 * h, h, f).unwrap();
            }
            (x - v(&[1f64.cos(), 1f64.sin()])).norm()
        };
        assert!(run(0.1) / run(0.05) >= 12.0);
    }

    #[test]
    fn outside_the_tube_points_move_straight_up() {
        let m = flat_line();
        let f = field_on(&m, vec![v(&[0.0, 1.0, 0.0]); m.len()], 0.1);
        let x = v(&[0.5, 0.0, 0.5]);
        assert_eq!(step_global(&x, &f, 0.01, 0).unwrap(), v(&[0.5, 0.0, 0.51]));
        assert_eq!(step_modified(&x, 0.0, &f, 0.01, None, 0).unwrap(), x);
    }

    #[test]
    fn phased_flow_stops_after_two_omega() {
        let m = flat_line();
        let f = field_on(&m, vec![v(&[0.0, 1.0, 0.0]); m.len()], 0.1);
        let x = m.position(10).clone();
        assert_eq!(step_modified(&x, 0.2, &f, 0.01, Some(0.1), 10).unwrap(), x);
        let mut cfg = FlowConfig::new(FlowMode::Phased, 0.01, 1.0);
        cfg.omega = Some(0.05);
        cfg.record_every = 5;
        let frame = NormalFrame::single(vec![v(&[0.0, 1.0, 0.0]); m.len()]).unwrap();
        let trace = match integrate(&m, &frame, &f, &cfg) {
            Err(FlowError::NotConverged(t)) => *t,
            other => panic!("expected a stalled phased run, got {other:?}"),
        };
        let late: Vec<&Snapshot> = trace.snapshots.iter().filter(|s| s.t >= 0.1).collect();
        assert!(late.len() > 2);
        for s in &late {
            assert_eq!(s.positions, late[0].positions);
        }
    }

    #[test]
    fn compressible_input_does_not_move() {
        let m = flat_line();
        let f = field_on(&m, vec![v(&[0.0, 0.0, 1.0]); m.len()], 0.1);
        let frame = NormalFrame::single(vec![v(&[0.0, 0.0, 1.0]); m.len()]).unwrap();
        let cfg = FlowConfig::new(FlowMode::Modified, 0.01, 1.0);
        let trace = integrate(&m, &frame, &f, &cfg).unwrap();
        assert!(trace.converged);
        assert!(trace.displacements().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn trace_round_trips_through_json_lines() {
        let m = flat_line();
        let f = field_on(&m, vec![v(&[0.0, 1.0, 0.0]); m.len()], 0.1);
        let frame = NormalFrame::single(vec![v(&[0.0, 1.0, 0.0]); m.len()]).unwrap();
        let cfg = FlowConfig::new(FlowMode::Modified, 0.01, 2.0);
        let trace = integrate(&m, &frame, &f, &cfg).unwrap();
        let mut buf = Vec::new();
        write_trace(&trace, &mut buf).unwrap();
        let (back, other) = read_traces(buf.as_slice()).unwrap();
        assert!(other.is_empty());
        assert_eq!(back, vec![trace]);
        let cut = &buf[..buf.len() / 2];
        assert!(read_traces(cut).is_err());
    }
}
