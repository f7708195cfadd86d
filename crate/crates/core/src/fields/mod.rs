//! Normal vector fields on sampled manifolds and the constructions that
//! straighten them: perpendicularisation, grounding, upwards rotation,
//! globalisation, and the local machinery around the downset.

mod ambient;
mod marking;
mod position;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::geometry::{AmbientSplit, EmbeddedManifold, TangentFrame};
use crate::smooth;
use crate::Vector;

pub use ambient::{globalize, AmbientField};
pub use marking::{
    downset, gradient_field, horizontal_set, localise, mark_neighbourhoods, upmost_field, Label,
    SubsetMarking,
};
pub use position::{
    ground_by_perturbation, mark_v, perturb_general_position, v_component_lengths,
    GeneralPositionOptions, GeneralPositionOutcome,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("field has {found} vectors per sample, expected {expected}")]
    WrongFieldCount { expected: usize, found: usize },
    #[error("frame covers {found} samples, manifold has {expected}")]
    SampleCountMismatch { expected: usize, found: usize },
    #[error("vector {field} at sample {sample} is not unit length")]
    NotUnit { sample: usize, field: usize },
    #[error("vector {field} at sample {sample} is dependent on the tangent space")]
    DependentField { sample: usize, field: usize },
    #[error("field is not perpendicular")]
    NotPerpendicular,
    #[error("field points vertically down at sample {sample}")]
    NotGrounded { sample: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("nearest foot is ambiguous between samples {a} and {b}")]
    AmbiguousFoot { a: usize, b: usize },
    #[error("nearest foot for anchor {anchor} leaves its local patch")]
    LocalFootOutOfPatch { anchor: usize },
    #[error("collar interpolation at sample {sample} passes through the downmost direction")]
    AntipodalCollar { sample: usize },
    #[error(
        "general position failed after {rounds} rounds: component through sample {sample} has length {length}"
    )]
    GeneralPositionFailed {
        rounds: usize,
        sample: usize,
        length: f64,
    },
}

/// Angle between two unit vectors, accurate near 0 and pi.
pub fn angle_between(a: &Vector, b: &Vector) -> f64 {
    let c = a.dot(b);
    let s = (a - b * c).norm();
    s.atan2(c)
}

/// Rotates unit `v` by `angle` in the plane of `v` and unit `target`, towards
/// `target`. Returns `None` when the plane is undefined (`v = -target`).
pub fn rotate_towards(v: &Vector, target: &Vector, angle: f64) -> Option<Vector> {
    let c = v.dot(target);
    let w = target - v * c;
    let wn = w.norm();
    if wn < 1e-15 {
        return if c > 0.0 { Some(v.clone()) } else { None };
    }
    let out = v * angle.cos() + w * (angle.sin() / wn);
    Some(out.normalize())
}

/// Applies to `e` the rotation in the plane of unit `a` and unit `b` that
/// takes `a` to `b`, fixing the orthogonal complement. `None` when `a = -b`.
pub fn rotate_with(a: &Vector, b: &Vector, e: &Vector) -> Option<Vector> {
    let c = a.dot(b);
    if c <= -1.0 + 1e-12 {
        return None;
    }
    let s = a + b;
    let mut out = e - &s * (s.dot(e) / (1.0 + c));
    out.axpy(2.0 * a.dot(e), b, 1.0);
    Some(out)
}

/// Replaces field 0 of `frame` by `field0`, turning the other fields with it
/// sample by sample (minimal rotation), so the frame stays orthonormal where
/// it was.
pub fn carry_frame(frame: &NormalFrame, field0: &NormalFrame) -> Result<NormalFrame, FieldError> {
    let vectors = (0..frame.len())
        .map(|i| {
            let a = frame.vector(i, 0);
            let b = field0.vector(i, 0);
            let mut vs = Vec::with_capacity(frame.k());
            vs.push(b.clone());
            for e in &frame.at(i)[1..] {
                vs.push(rotate_with(a, b, e).unwrap_or_else(|| e.clone()));
            }
            vs
        })
        .collect();
    NormalFrame::new(vectors, false)
}

/// Great-circle interpolation between unit vectors.
pub fn slerp(a: &Vector, b: &Vector, w: f64) -> Option<Vector> {
    if w <= 0.0 {
        return Some(a.clone());
    }
    if w >= 1.0 {
        return Some(b.clone());
    }
    let theta = angle_between(a, b);
    rotate_towards(a, b, w * theta)
}

/// Per-sample list of `k` unit vectors normal to the manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalFrame {
    vectors: Vec<Vec<Vector>>,
    perpendicular: bool,
}

impl NormalFrame {
    /// `vectors[i]` holds the `k` vectors at sample `i`; all must be unit.
    pub fn new(vectors: Vec<Vec<Vector>>, perpendicular: bool) -> Result<Self, FieldError> {
        let k = vectors.first().map_or(0, Vec::len);
        for (sample, vs) in vectors.iter().enumerate() {
            if vs.len() != k || k == 0 {
                return Err(FieldError::WrongFieldCount {
                    expected: k.max(1),
                    found: vs.len(),
                });
            }
            for (field, v) in vs.iter().enumerate() {
                if (v.norm() - 1.0).abs() > 1e-9 {
                    return Err(FieldError::NotUnit { sample, field });
                }
            }
        }
        Ok(Self {
            vectors,
            perpendicular,
        })
    }

    /// A single field, normalised.
    pub fn single(field: Vec<Vector>) -> Result<Self, FieldError> {
        Self::from_fields(vec![field])
    }

    /// `fields[j][i]` is field `j` at sample `i`; every vector is normalised.
    pub fn from_fields(fields: Vec<Vec<Vector>>) -> Result<Self, FieldError> {
        let count = fields.first().map_or(0, Vec::len);
        let mut vectors = vec![Vec::with_capacity(fields.len()); count];
        for (field, values) in fields.into_iter().enumerate() {
            if values.len() != count {
                return Err(FieldError::SampleCountMismatch {
                    expected: count,
                    found: values.len(),
                });
            }
            for (sample, v) in values.into_iter().enumerate() {
                let n = v.norm();
                if !(n > 1e-300) {
                    return Err(FieldError::NotUnit { sample, field });
                }
                vectors[sample].push(v / n);
            }
        }
        Self::new(vectors, false)
    }

    pub fn k(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn is_perpendicular(&self) -> bool {
        self.perpendicular
    }

    pub fn vector(&self, sample: usize, field: usize) -> &Vector {
        &self.vectors[sample][field]
    }

    pub fn at(&self, sample: usize) -> &[Vector] {
        &self.vectors[sample]
    }

    /// Field `j` at every sample.
    pub fn field(&self, j: usize) -> Vec<Vector> {
        self.vectors.iter().map(|vs| vs[j].clone()).collect()
    }

    /// Frame made of field `j` only.
    pub fn select(&self, j: usize) -> NormalFrame {
        NormalFrame {
            vectors: self.vectors.iter().map(|vs| vec![vs[j].clone()]).collect(),
            perpendicular: self.perpendicular,
        }
    }

    pub fn with_perpendicular(mut self, flag: bool) -> Self {
        self.perpendicular = flag;
        self
    }

    /// Smallest singular value of `[tangents | field vectors]` over samples,
    /// with the sample where it occurs.
    pub fn independence_margin(&self, tangents: &TangentFrame) -> (f64, usize) {
        let mut worst = (f64::INFINITY, 0);
        for i in 0..self.len() {
            let cols: Vec<Vector> = tangents
                .basis(i)
                .iter()
                .chain(self.vectors[i].iter())
                .cloned()
                .collect();
            let mat = DMatrix::from_columns(&cols);
            let sv = mat.singular_values();
            let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
            if smallest < worst.0 {
                worst = (smallest, i);
            }
        }
        worst
    }

    pub fn check_independence(&self, tangents: &TangentFrame, tol: f64) -> Result<(), FieldError> {
        if tangents.len() != self.len() {
            return Err(FieldError::SampleCountMismatch {
                expected: tangents.len(),
                found: self.len(),
            });
        }
        let (margin, sample) = self.independence_margin(tangents);
        if margin > tol {
            Ok(())
        } else {
            Err(FieldError::DependentField { sample, field: 0 })
        }
    }

    /// Largest |cos| between a field vector and its tangent space.
    pub fn max_tangential_component(&self, tangents: &TangentFrame) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            for v in &self.vectors[i] {
                worst = worst.max(tangents.tangent_component(i, v).norm());
            }
        }
        worst
    }
}

/// Replaces every vector by its normalised component orthogonal to the
/// tangent space (and, for `k > 1`, to the preceding vectors).
pub fn perpendicularize(
    m: &EmbeddedManifold,
    frame: &NormalFrame,
    tangents: &TangentFrame,
) -> Result<NormalFrame, FieldError> {
    if frame.len() != m.len() {
        return Err(FieldError::SampleCountMismatch {
            expected: m.len(),
            found: frame.len(),
        });
    }
    const TOL: f64 = 1e-9;
    let mut out = Vec::with_capacity(frame.len());
    for i in 0..frame.len() {
        let mut done: Vec<Vector> = Vec::with_capacity(frame.k());
        for (j, v) in frame.at(i).iter().enumerate() {
            let mut w = tangents.normal_component(i, v);
            for prev in &done {
                let c = prev.dot(&w);
                w.axpy(-c, prev, 1.0);
            }
            let n = w.norm();
            if n < TOL {
                return Err(FieldError::DependentField {
                    sample: i,
                    field: j,
                });
            }
            done.push(w / n);
        }
        out.push(done);
    }
    NormalFrame::new(out, true)
}

/// How far a single field stays from the downward vertical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundingReport {
    /// Minimum angle between the field and `-u`, in `[0, pi]`.
    pub epsilon: f64,
    pub argmin: usize,
}

impl GroundingReport {
    pub fn is_grounded(&self) -> bool {
        self.epsilon > 0.0
    }

    pub fn is_epsilon_grounded(&self, eps: f64) -> bool {
        self.epsilon >= eps
    }
}

/// Minimum angle between field 0 and the downward vertical.
pub fn measure_grounding(frame: &NormalFrame, split: AmbientSplit) -> GroundingReport {
    let down = -split.up();
    let mut report = GroundingReport {
        epsilon: f64::INFINITY,
        argmin: 0,
    };
    for i in 0..frame.len() {
        let a = angle_between(frame.vector(i, 0), &down);
        if a < report.epsilon {
            report = GroundingReport {
                epsilon: a,
                argmin: i,
            };
        }
    }
    report
}

/// Rotates field 0 towards the upward vertical by `pi/2 - mu`, stopping at
/// vertical. The cap is smoothed over a band of half-width `smoothing`.
pub fn upwards_rotate(
    frame: &NormalFrame,
    split: AmbientSplit,
    mu: f64,
    smoothing: f64,
) -> Result<NormalFrame, FieldError> {
    if !frame.is_perpendicular() {
        return Err(FieldError::NotPerpendicular);
    }
    if !(mu > 0.0 && mu < std::f64::consts::FRAC_PI_2) || smoothing < 0.0 {
        return Err(FieldError::InvalidParameter(format!(
            "need 0 < mu < pi/2 and smoothing >= 0, got mu = {mu}, smoothing = {smoothing}"
        )));
    }
    let up = split.up();
    let cap = std::f64::consts::FRAC_PI_2 - mu;
    let mut out = Vec::with_capacity(frame.len());
    for i in 0..frame.len() {
        let alpha = frame.vector(i, 0);
        let theta = angle_between(alpha, &up);
        let r = smooth::soft_min(theta, cap, smoothing);
        let beta = if r >= theta {
            up.clone()
        } else {
            rotate_towards(alpha, &up, r).ok_or(FieldError::NotGrounded { sample: i })?
        };
        out.push(vec![beta]);
    }
    NormalFrame::new(out, false)
}
