use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::marking::{downset, gradient_field, SubsetMarking};
use super::{angle_between, perpendicularize, rotate_towards, FieldError, NormalFrame};
use crate::geometry::{EmbeddedManifold, TangentFrame, Topology};
use crate::smooth;
use crate::Vector;

/// Neighbours used to follow a flowline: the two polyline neighbours, or the
/// eight surrounding grid samples.
fn flow_neighbours(m: &EmbeddedManifold, i: usize) -> Vec<usize> {
    match m.topology() {
        Topology::Polyline { closed } => {
            let n = m.len();
            let mut out = Vec::with_capacity(2);
            if i > 0 {
                out.push(i - 1);
            } else if closed {
                out.push(n - 1);
            }
            if i + 1 < n {
                out.push(i + 1);
            } else if closed {
                out.push(0);
            }
            out
        }
        Topology::Grid { rows, cols } => {
            let (r, c) = ((i / cols) as isize, (i % cols) as isize);
            let mut out = Vec::with_capacity(8);
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if (dr, dc) != (0, 0) && rr >= 0 && cc >= 0 && rr < rows as isize && cc < cols as isize {
                        out.push(rr as usize * cols + cc as usize);
                    }
                }
            }
            out
        }
    }
}

/// Walks the discrete integral curve of `phi` from `start` in direction
/// `sign`, while `allowed` holds and the accumulated length stays below
/// `max_len`. Returns visited samples (excluding `start`) with the length at
/// which each was reached.
fn walk(
    m: &EmbeddedManifold,
    phi: &[Vector],
    start: usize,
    sign: f64,
    max_len: f64,
    allowed: &dyn Fn(usize) -> bool,
) -> Vec<(usize, f64)> {
    const MIN_PHI: f64 = 1e-9;
    let mut out = Vec::new();
    let mut seen = vec![false; m.len()];
    seen[start] = true;
    let mut cur = start;
    let mut len = 0.0;
    let mut heading: Option<Vector> = None;
    loop {
        let dir = if phi[cur].norm() > MIN_PHI {
            let d = &phi[cur] * (sign / phi[cur].norm());
            match &heading {
                Some(h) if d.dot(h) < 0.0 => -d,
                _ => d,
            }
        } else {
            break;
        };
        let mut best: Option<(usize, f64, f64)> = None;
        for j in flow_neighbours(m, cur) {
            if seen[j] {
                continue;
            }
            let step = m.position(j) - m.position(cur);
            let l = step.norm();
            let cos = step.dot(&dir) / l;
            if cos > 0.5 && best.map_or(true, |b| cos > b.1) {
                best = Some((j, cos, l));
            }
        }
        let Some((j, _, l)) = best else { break };
        if !allowed(j) || len + l > max_len {
            break;
        }
        len += l;
        heading = Some(dir);
        seen[j] = true;
        out.push((j, len));
        cur = j;
    }
    out
}

/// Marks `V`: samples on the flowlines of `phi` through `D - U'`, up to
/// `0.4 * delta` either way, plus their immediate neighbours.
pub fn mark_v(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    marking: &SubsetMarking,
    delta: f64,
) -> SubsetMarking {
    let phi = gradient_field(m, tangents);
    let mut out = marking.clone();
    out.v = vec![false; m.len()];
    let seeds = marking.d_outside_inner();
    let reach = 0.4 * delta;
    let mut core = vec![false; m.len()];
    for i in (0..m.len()).filter(|&i| seeds[i]) {
        core[i] = true;
        for sign in [1.0, -1.0] {
            for (j, _) in walk(m, &phi, i, sign, reach, &|_| true) {
                core[j] = true;
            }
        }
    }
    let adj = m.neighbours();
    for i in (0..m.len()).filter(|&i| core[i]) {
        out.v[i] = true;
        if m.manifold_dim() > 1 {
            for &j in &adj[i] {
                out.v[j] = true;
            }
        }
    }
    out
}

/// Length of the flowline component inside `V` through each sample of
/// `D - U'`, as `(sample, length)` pairs.
pub fn v_component_lengths(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    marking: &SubsetMarking,
) -> Vec<(usize, f64)> {
    let phi = gradient_field(m, tangents);
    let seeds = marking.d_outside_inner();
    let inside = |j: usize| marking.v[j];
    (0..m.len())
        .filter(|&i| seeds[i])
        .map(|i| {
            let total: f64 = [1.0, -1.0]
                .iter()
                .map(|&sign| {
                    walk(m, &phi, i, sign, f64::INFINITY, &inside)
                        .last()
                        .map_or(0.0, |&(_, l)| l)
                })
                .sum();
            (i, total)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneralPositionOptions {
    /// Flowline components inside `V` must be shorter than this.
    pub delta: f64,
    /// Largest rotation applied to the field by one perturbation round.
    pub perturb_angle: f64,
    pub max_rounds: usize,
    pub seed: u64,
    /// Angular tolerance used to re-detect the downset.
    pub downset_tol: f64,
}

#[derive(Debug, Clone)]
pub struct GeneralPositionOutcome {
    pub frame: NormalFrame,
    /// Marking with `D` re-detected and `V` filled in.
    pub marking: SubsetMarking,
    pub rounds: usize,
    pub lengths: Vec<(usize, f64)>,
}

/// Perturbs field 0 near `D - U'` until every flowline component of `phi`
/// inside `V` is shorter than `delta`.
pub fn perturb_general_position(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    alpha: &NormalFrame,
    marking: &SubsetMarking,
    opts: &GeneralPositionOptions,
) -> Result<GeneralPositionOutcome, FieldError> {
    if !(opts.delta > 0.0) {
        return Err(FieldError::InvalidParameter(format!(
            "delta must be positive, got {}",
            opts.delta
        )));
    }
    let mut frame = alpha.clone();
    let mut marking = marking.clone();
    for round in 0..=opts.max_rounds {
        marking = mark_v(m, tangents, &marking, opts.delta);
        let lengths = v_component_lengths(m, tangents, &marking);
        let worst = lengths
            .iter()
            .copied()
            .max_by(|a, b| a.1.total_cmp(&b.1));
        match worst {
            Some((sample, length)) if length >= opts.delta => {
                if round == opts.max_rounds {
                    return Err(FieldError::GeneralPositionFailed {
                        rounds: round,
                        sample,
                        length,
                    });
                }
            }
            _ => {
                return Ok(GeneralPositionOutcome {
                    frame,
                    marking,
                    rounds: round,
                    lengths,
                })
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(round as u64));
        frame = perturb_near(m, tangents, &frame, &marking.d_outside_inner(), opts, &mut rng)?;
        marking = downset(m, tangents, &frame, &marking, opts.downset_tol)?;
    }
    unreachable!("loop returns on its last round")
}

/// Smooth random rotation of field 0, supported within `delta` of `mask`.
/// The rotation angle is a single plane wave of wavelength between `2 delta`
/// and `4 delta`, so zeros of the perturbation along a flowline are at least
/// `delta` apart.
fn perturb_near(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    frame: &NormalFrame,
    mask: &[bool],
    opts: &GeneralPositionOptions,
    rng: &mut ChaCha8Rng,
) -> Result<NormalFrame, FieldError> {
    use std::f64::consts::{PI, TAU};
    let dist = m.distance_to_set(mask);
    let dim = m.ambient_dim();
    let pdim = m.params().first().map_or(1, Vec::len);
    // grid parameters are integer indices
    let scale = match m.topology() {
        Topology::Polyline { .. } => 1.0,
        Topology::Grid { .. } => m.max_edge_length(),
    };
    let mut k: Vec<f64> = (0..pdim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let kn = k.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let wavenumber = rng.gen_range(PI / (2.0 * opts.delta)..PI / opts.delta);
    k.iter_mut().for_each(|x| *x *= wavenumber / kn);
    let phase = rng.gen_range(0.0..TAU);
    let axis = Vector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let a = frame.vector(i, 0).clone();
        let z = dist[i] / opts.delta;
        if z >= 1.0 {
            out.push(a);
            continue;
        }
        let arg: f64 = k.iter().zip(&m.params()[i]).map(|(k, x)| k * x * scale).sum::<f64>() + phase;
        let angle = opts.perturb_angle * (1.0 - smooth::step(z)) * arg.sin();
        let mut w = tangents.normal_component(i, &axis);
        w.axpy(-w.dot(&a), &a, 1.0);
        if w.norm() < 1e-9 {
            out.push(a);
            continue;
        }
        let target = if angle >= 0.0 { w.normalize() } else { -w.normalize() };
        out.push(rotate_towards(&a, &target, angle.abs()).unwrap_or(a));
    }
    let out = NormalFrame::single(out)?;
    perpendicularize(m, &out, tangents)
}

/// Rotates field 0 upwards inside its normal space wherever it is within
/// `min_angle` of the downward vertical, with a smooth bump of intrinsic
/// radius `radius`. Needs a normal space of dimension at least two.
pub fn ground_by_perturbation(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    alpha: &NormalFrame,
    min_angle: f64,
    radius: f64,
    seed: u64,
) -> Result<NormalFrame, FieldError> {
    let up = m.split().up();
    let down = -&up;
    let bad: Vec<bool> = (0..m.len())
        .map(|i| angle_between(alpha.vector(i, 0), &down) < min_angle)
        .collect();
    if !bad.iter().any(|&b| b) {
        return Ok(alpha.clone());
    }
    let dist = m.distance_to_set(&bad);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fallback = Vector::from_fn(m.ambient_dim(), |_, _| rng.gen_range(-1.0..1.0));
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let a = alpha.vector(i, 0).clone();
        let z = dist[i] / radius;
        if z >= 1.0 {
            out.push(a);
            continue;
        }
        let mut w = tangents.normal_component(i, &up);
        w.axpy(-w.dot(&a), &a, 1.0);
        if w.norm() < 1e-6 {
            w = tangents.normal_component(i, &fallback);
            w.axpy(-w.dot(&a), &a, 1.0);
        }
        if w.norm() < 1e-12 {
            return Err(FieldError::NotGrounded { sample: i });
        }
        let angle = 2.0 * min_angle * (1.0 - smooth::step(z));
        out.push(rotate_towards(&a, &w.normalize(), angle).unwrap_or(a));
    }
    let out = NormalFrame::single(out)?;
    perpendicularize(m, &out, tangents)
}
