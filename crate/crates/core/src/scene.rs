//! Scene files: a manifold generator, a field generator and configuration
//! overrides, in TOML.
//!
//! ```toml
//! format = "compression-scene/1"
//! name = "twist"
//! mode = "local"
//!
//! [manifold]
//! generator = "twist_line"
//! samples = 400
//! length = 4.0
//! slope = 0.6
//!
//! [field]
//! generator = "twist"
//! turns = 1.0
//! width = 1.0
//!
//! [config]
//! epsilon_budget = 0.3
//! ```

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compress::CompressionConfig;
use crate::fields::{upmost_field, FieldError, NormalFrame};
use crate::geometry::{estimate_tangent_frame, AmbientSplit, EmbeddedManifold, GeometryError, Topology};
use crate::smooth;
use crate::Vector;

pub const SCENE_FORMAT: &str = "compression-scene/1";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene parse error: {0}")]
    Parse(String),
    #[error("unsupported scene format {0:?}, expected {SCENE_FORMAT:?}")]
    Format(String),
    #[error("scene field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("unknown builtin scene {0:?}")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

fn invalid(field: &str, message: impl Into<String>) -> SceneError {
    SceneError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

fn default_q2() -> usize {
    2
}

fn default_q3() -> usize {
    3
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    /// Straight segment rising at angle `slope` in the first and vertical
    /// coordinates.
    #[serde(alias = "twist_line")]
    Line {
        samples: usize,
        length: f64,
        #[serde(default)]
        slope: f64,
        #[serde(default = "default_q2")]
        q: usize,
    },
    /// Circle in the first two coordinates; vertical coordinate `j` is
    /// `heights[j] * sin(theta + j pi/2)`.
    Circle {
        samples: usize,
        #[serde(default = "unit")]
        radius: f64,
        #[serde(default = "default_q2")]
        q: usize,
        #[serde(default = "default_one")]
        n: usize,
        #[serde(default)]
        heights: Vec<f64>,
    },
    Helix {
        samples: usize,
        turns: f64,
        radius: f64,
        pitch: f64,
    },
    /// Rectangle `[0, width] x [0, height]` tilted by `slope` towards the
    /// vertical along its first side.
    #[serde(alias = "two_in_four")]
    GridPlane {
        rows: usize,
        cols: usize,
        width: f64,
        height: f64,
        #[serde(default)]
        slope: f64,
        #[serde(default = "default_q3")]
        q: usize,
    },
    /// `t -> (sin t cos t, sin t)` in the plane, vertical second coordinate.
    FigureEight { samples: usize },
    /// `(s, t) -> (s, t^2, s t, t)` over `[-extent, extent]^2`.
    Whitney {
        rows: usize,
        cols: usize,
        extent: f64,
    },
    Explicit {
        positions: Vec<Vec<f64>>,
        q: usize,
        n: usize,
        #[serde(default)]
        closed: bool,
        /// Grid shape; a polyline when absent.
        #[serde(default)]
        grid: Option<[usize; 2]>,
    },
}

fn unit() -> f64 {
    1.0
}

fn default_turns() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    ConstantUp,
    Constant { vector: Vec<f64> },
    /// The upmost unit normal.
    SlopeNormal,
    /// Normalised normal component of a coordinate axis.
    ProjectedAxis { axis: usize },
    /// Turns `turns` times around the upmost normal over a window of length
    /// `width` centred at `center` (arc length along the first parameter
    /// direction; default the middle sample).
    Twist {
        #[serde(default = "default_turns")]
        turns: f64,
        #[serde(default)]
        center: Option<f64>,
        width: f64,
        /// Ambient axis giving the second direction of the turning plane.
        #[serde(default = "default_one")]
        side_axis: usize,
    },
    /// The tangent of a planar curve turned by a right angle clockwise.
    NormalRotation,
    /// Two fields on a curve in `R^2 x R^2` whose frame turns `turns` times
    /// in the vertical plane, tilted towards the radial direction by `phi`
    /// and `chi`.
    FrameTwist {
        #[serde(default = "default_turns")]
        turns: f64,
        phi: f64,
        chi: f64,
    },
    /// `fields[j][i]`: field `j` at sample `i`.
    Explicit { fields: Vec<Vec<Vec<f64>>> },
}

/// Relative region: samples whose arc-length parameter lies outside
/// `[inside[0], inside[1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeSpec {
    pub inside: [f64; 2],
}

/// Orthographic view for SVG export: the two ambient axes drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub axes: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub format: String,
    pub name: String,
    #[serde(default)]
    pub mode: Option<String>,
    pub manifold: ManifoldSpec,
    pub field: FieldSpec,
    #[serde(default)]
    pub relative: Option<RelativeSpec>,
    #[serde(default)]
    pub camera: Option<CameraSpec>,
    #[serde(default)]
    pub config: CompressionConfig,
}

/// A scene resolved into geometry.
#[derive(Debug, Clone)]
pub struct BuiltScene {
    pub name: String,
    pub manifold: EmbeddedManifold,
    pub frame: NormalFrame,
    pub config: CompressionConfig,
    pub camera: [usize; 2],
}

const BUILTINS: &[(&str, &str)] = &[
    ("twist", include_str!("../scenes/twist.toml")),
    ("figure_eight", include_str!("../scenes/figure_eight.toml")),
    ("multi_circle", include_str!("../scenes/multi_circle.toml")),
    ("whitney", include_str!("../scenes/whitney.toml")),
    ("two_in_four", include_str!("../scenes/two_in_four.toml")),
    ("compressible", include_str!("../scenes/compressible.toml")),
];

impl Scene {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = toml::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
        if scene.format != SCENE_FORMAT {
            return Err(SceneError::Format(scene.format));
        }
        Ok(scene)
    }

    pub fn builtin(name: &str) -> Result<Self, SceneError> {
        BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::parse(text))
            .unwrap_or_else(|| Err(SceneError::UnknownBuiltin(name.to_string())))
    }

    pub fn builtin_names() -> impl Iterator<Item = &'static str> {
        BUILTINS.iter().map(|(n, _)| *n)
    }

    pub fn build(&self) -> Result<BuiltScene, SceneError> {
        let manifold = build_manifold(&self.manifold)?;
        let arc = arc_coordinate(&manifold);
        let mut frame = build_field(&self.field, &manifold, &arc)?;
        if frame.len() != manifold.len() {
            return Err(invalid("field", "sample count does not match the manifold"));
        }
        let mut config = self.config.clone();
        if let Some(rel) = &self.relative {
            config.relative = Some(arc.iter().map(|&s| s < rel.inside[0] || s > rel.inside[1]).collect());
        }
        if frame.k() == 0 {
            frame = NormalFrame::single(vec![manifold.split().up(); manifold.len()])?;
        }
        let camera = self.camera.as_ref().map_or([0, 1], |c| c.axes);
        if camera.iter().any(|&a| a >= manifold.ambient_dim()) {
            return Err(invalid("camera.axes", "axis out of range"));
        }
        Ok(BuiltScene {
            name: self.name.clone(),
            manifold,
            frame,
            config,
            camera,
        })
    }
}

fn need(cond: bool, field: &str, message: &str) -> Result<(), SceneError> {
    if cond {
        Ok(())
    } else {
        Err(invalid(field, message))
    }
}

fn build_manifold(spec: &ManifoldSpec) -> Result<EmbeddedManifold, SceneError> {
    let v = Vector::from_vec;
    match spec {
        ManifoldSpec::Line {
            samples,
            length,
            slope,
            q,
        } => {
            need(*samples >= 2, "manifold.samples", "need at least 2 samples")?;
            need(*length > 0.0, "manifold.length", "must be positive")?;
            let split = AmbientSplit::new(*q, 1, 0)?;
            let pts = (0..*samples)
                .map(|i| {
                    let s = length * i as f64 / (*samples - 1) as f64;
                    let mut p = vec![0.0; q + 1];
                    p[0] = s * slope.cos();
                    p[*q] = s * slope.sin();
                    v(p)
                })
                .collect();
            Ok(EmbeddedManifold::polyline(pts, false, split)?)
        }
        ManifoldSpec::Circle {
            samples,
            radius,
            q,
            n,
            heights,
        } => {
            need(*samples >= 3, "manifold.samples", "need at least 3 samples")?;
            need(heights.len() <= *n, "manifold.heights", "one amplitude per vertical axis")?;
            let split = AmbientSplit::new(*q, *n, 0)?;
            let pts = (0..*samples)
                .map(|i| {
                    let t = TAU * i as f64 / *samples as f64;
                    let mut p = vec![0.0; q + n];
                    p[0] = radius * t.cos();
                    p[1] = radius * t.sin();
                    for (j, h) in heights.iter().enumerate() {
                        p[q + j] = h * (t + j as f64 * TAU / 4.0).sin();
                    }
                    v(p)
                })
                .collect();
            Ok(EmbeddedManifold::polyline(pts, true, split)?)
        }
        ManifoldSpec::Helix {
            samples,
            turns,
            radius,
            pitch,
        } => {
            need(*samples >= 2, "manifold.samples", "need at least 2 samples")?;
            let split = AmbientSplit::new(2, 1, 0)?;
            let pts = (0..*samples)
                .map(|i| {
                    let t = TAU * turns * i as f64 / (*samples - 1) as f64;
                    v(vec![radius * t.cos(), radius * t.sin(), pitch * t / TAU])
                })
                .collect();
            Ok(EmbeddedManifold::polyline(pts, false, split)?)
        }
        ManifoldSpec::GridPlane {
            rows,
            cols,
            width,
            height,
            slope,
            q,
        } => {
            need(*rows >= 2 && *cols >= 2, "manifold.rows", "grid needs at least 2 x 2 samples")?;
            need(*q >= 2, "manifold.q", "a surface needs q >= 2")?;
            let split = AmbientSplit::new(*q, 1, 0)?;
            let mut pts = Vec::with_capacity(rows * cols);
            for r in 0..*rows {
                for c in 0..*cols {
                    let x = width * c as f64 / (*cols - 1) as f64;
                    let y = height * r as f64 / (*rows - 1) as f64;
                    let mut p = vec![0.0; q + 1];
                    p[0] = x * slope.cos();
                    p[1] = y;
                    p[*q] = x * slope.sin();
                    pts.push(v(p));
                }
            }
            Ok(EmbeddedManifold::grid(*rows, *cols, pts, split)?)
        }
        ManifoldSpec::FigureEight { samples } => {
            need(*samples >= 8, "manifold.samples", "need at least 8 samples")?;
            let split = AmbientSplit::new(1, 1, 0)?;
            let pts = (0..*samples)
                .map(|i| {
                    let t = TAU * (i as f64 + 0.5) / *samples as f64;
                    v(vec![t.sin() * t.cos(), t.sin()])
                })
                .collect();
            Ok(EmbeddedManifold::polyline(pts, true, split)?)
        }
        ManifoldSpec::Whitney { rows, cols, extent } => {
            need(*rows >= 3 && *cols >= 3, "manifold.rows", "grid needs at least 3 x 3 samples")?;
            let split = AmbientSplit::new(3, 1, 0)?;
            let mut pts = Vec::with_capacity(rows * cols);
            for r in 0..*rows {
                for c in 0..*cols {
                    let s = extent * (2.0 * c as f64 / (*cols - 1) as f64 - 1.0);
                    let t = extent * (2.0 * r as f64 / (*rows - 1) as f64 - 1.0);
                    pts.push(v(vec![s, t * t, s * t, t]));
                }
            }
            Ok(EmbeddedManifold::grid(*rows, *cols, pts, split)?)
        }
        ManifoldSpec::Explicit {
            positions,
            q,
            n,
            closed,
            grid,
        } => {
            let split = AmbientSplit::new(*q, *n, 0)?;
            let pts: Vec<Vector> = positions.iter().cloned().map(v).collect();
            Ok(match grid {
                Some([rows, cols]) => EmbeddedManifold::grid(*rows, *cols, pts, split)?,
                None => EmbeddedManifold::polyline(pts, *closed, split)?,
            })
        }
    }
}

/// Arc length along the first parameter direction (along the curve, or
/// along each grid row).
pub fn arc_coordinate(m: &EmbeddedManifold) -> Vec<f64> {
    let p = m.positions();
    match m.topology() {
        Topology::Polyline { .. } => {
            let mut out = vec![0.0; m.len()];
            for i in 1..m.len() {
                out[i] = out[i - 1] + (&p[i] - &p[i - 1]).norm();
            }
            out
        }
        Topology::Grid { rows, cols } => {
            let mut out = vec![0.0; m.len()];
            for r in 0..rows {
                for c in 1..cols {
                    let i = r * cols + c;
                    out[i] = out[i - 1] + (&p[i] - &p[i - 1]).norm();
                }
            }
            out
        }
    }
}

fn build_field(spec: &FieldSpec, m: &EmbeddedManifold, arc: &[f64]) -> Result<NormalFrame, SceneError> {
    let dim = m.ambient_dim();
    let up = m.split().up();
    match spec {
        FieldSpec::ConstantUp => Ok(NormalFrame::single(vec![up; m.len()])?),
        FieldSpec::Constant { vector } => {
            need(vector.len() == dim, "field.vector", "dimension does not match the ambient space")?;
            Ok(NormalFrame::single(vec![Vector::from_vec(vector.clone()); m.len()])?)
        }
        FieldSpec::SlopeNormal => {
            let t = estimate_tangent_frame(m)?;
            let psi = upmost_field(m, &t)
                .into_iter()
                .enumerate()
                .map(|(i, p)| p.ok_or_else(|| invalid("field", format!("no upmost normal at sample {i}"))))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(NormalFrame::single(psi)?)
        }
        FieldSpec::ProjectedAxis { axis } => {
            need(*axis < dim, "field.axis", "axis out of range")?;
            let t = estimate_tangent_frame(m)?;
            let mut e = Vector::zeros(dim);
            e[*axis] = 1.0;
            let mut out = Vec::with_capacity(m.len());
            for i in 0..m.len() {
                let v = t.normal_component(i, &e);
                need(v.norm() > 1e-9, "field.axis", "axis is tangent somewhere")?;
                out.push(v.normalize());
            }
            Ok(NormalFrame::single(out)?)
        }
        FieldSpec::Twist {
            turns,
            center,
            width,
            side_axis,
        } => {
            need(*width > 0.0, "field.width", "must be positive")?;
            need(*side_axis < dim, "field.side_axis", "axis out of range")?;
            let t = estimate_tangent_frame(m)?;
            let center = center.unwrap_or_else(|| arc[(m.len() - 1) / 2]);
            let mut side = Vector::zeros(dim);
            side[*side_axis] = 1.0;
            let psi = upmost_field(m, &t);
            let mut out = Vec::with_capacity(m.len());
            for i in 0..m.len() {
                let p = psi[i]
                    .clone()
                    .ok_or_else(|| invalid("field", format!("no upmost normal at sample {i}")))?;
                let mut w = t.normal_component(i, &side);
                w.axpy(-w.dot(&p), &p, 1.0);
                need(w.norm() > 1e-9, "field.side_axis", "side axis is not transverse to the upmost normal")?;
                let w = w.normalize();
                let z = (arc[i] - center) / width + 0.5;
                let theta = TAU * turns * smooth::step(z);
                out.push(p * theta.cos() + w * theta.sin());
            }
            Ok(NormalFrame::single(out)?)
        }
        FieldSpec::NormalRotation => {
            need(dim == 2, "field", "normal_rotation needs a planar curve")?;
            let t = estimate_tangent_frame(m)?;
            let out = (0..m.len())
                .map(|i| {
                    let d = &t.basis(i)[0];
                    Vector::from_vec(vec![d[1], -d[0]])
                })
                .collect();
            Ok(NormalFrame::single(out)?)
        }
        FieldSpec::FrameTwist { turns, phi, chi } => {
            let s = m.split();
            need(s.q >= 2 && s.n == 2, "field", "frame_twist needs a curve in R^q x R^2")?;
            let (e3, e4) = (s.q, s.q + 1);
            let mut a1 = Vec::with_capacity(m.len());
            let mut a2 = Vec::with_capacity(m.len());
            for i in 0..m.len() {
                let p = m.position(i);
                let theta = p[1].atan2(p[0]);
                let kappa = turns * theta;
                let rn = (p[0] * p[0] + p[1] * p[1]).sqrt();
                let mut r = Vector::zeros(dim);
                r[0] = p[0] / rn;
                r[1] = p[1] / rn;
                let mut a = Vector::zeros(dim);
                a[e3] = kappa.cos();
                a[e4] = kappa.sin();
                let mut b = Vector::zeros(dim);
                b[e3] = -kappa.sin();
                b[e4] = kappa.cos();
                let f1 = &a * phi.cos() + &r * phi.sin();
                let f2 = &b * chi.cos() + (&r * phi.cos() - &a * phi.sin()) * chi.sin();
                a1.push(f1);
                a2.push(f2);
            }
            Ok(NormalFrame::from_fields(vec![a1, a2])?)
        }
        FieldSpec::Explicit { fields } => {
            need(!fields.is_empty(), "field.fields", "at least one field")?;
            let fields = fields
                .iter()
                .map(|f| f.iter().cloned().map(Vector::from_vec).collect())
                .collect::<Vec<Vec<Vector>>>();
            if fields.iter().flatten().any(|v| v.len() != dim) {
                return Err(invalid("field.fields", "dimension does not match the ambient space"));
            }
            Ok(NormalFrame::from_fields(fields)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{measure_grounding, perpendicularize};

    #[test]
    fn builtins_parse_and_build() {
        for name in Scene::builtin_names() {
            let scene = Scene::builtin(name).unwrap();
            let built = scene.build().unwrap();
            assert_eq!(built.frame.len(), built.manifold.len(), "{name}");
        }
    }

    #[test]
    fn twist_scene_is_grounded_at_its_slope() {
        let built = Scene::builtin("twist").unwrap().build().unwrap();
        let t = estimate_tangent_frame(&built.manifold).unwrap();
        let perp = perpendicularize(&built.manifold, &built.frame, &t).unwrap();
        let g = measure_grounding(&perp, built.manifold.split());
        assert!((g.epsilon - 0.6).abs() < 1e-9, "{}", g.epsilon);
        assert_eq!(g.argmin, 199);
    }

    #[test]
    fn malformed_scene_names_the_problem() {
        let err = Scene::parse("format = \"compression-scene/1\"\nname = 3\n").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
        let err = Scene::parse(
            "format = \"compression-scene/1\"\nname = \"x\"\n[manifold]\ngenerator = \"line\"\nsamples = 4\nlength = 1.0\nbogus = 1\n[field]\ngenerator = \"constant_up\"\n",
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(matches!(Scene::parse("format = \"other\"\nname=\"x\"\n[manifold]\ngenerator=\"figure_eight\"\nsamples=10\n[field]\ngenerator=\"normal_rotation\"\n"), Err(SceneError::Format(_))));
    }
}
