use std::ops::Range;

use super::{rotate_towards, FieldError, NormalFrame};
use crate::geometry::{closest_on_segment, closest_on_triangle, EmbeddedManifold, Topology, TubularNeighbourhood};
use crate::smooth;
use crate::Vector;

const CHUNK: usize = 16;

#[derive(Debug, Clone)]
struct Chunk {
    lo: Vec<f64>,
    hi: Vec<f64>,
    range: Range<usize>,
}

impl Chunk {
    fn dist2(&self, x: &[f64]) -> f64 {
        let mut d = 0.0;
        for k in 0..x.len() {
            let e = (self.lo[k] - x[k]).max(x[k] - self.hi[k]).max(0.0);
            d += e * e;
        }
        d
    }
}

#[derive(Debug, Clone, Copy)]
struct Foot {
    simplex: usize,
    weights: [f64; 3],
    dist2: f64,
}

/// Unit vector field on the ambient space: the rotated field `beta` on `M`,
/// the vertical `u` outside the tubular neighbourhood, and `beta` rotated
/// towards `u` along the radial fibres in between.
///
/// Evaluation is a pure function of the point and safe to call from many
/// threads at once.
#[derive(Debug, Clone)]
pub struct AmbientField {
    positions: Vec<Vector>,
    beta: Vec<Vector>,
    up: Vector,
    radius: f64,
    locality: f64,
    immersed: bool,
    arity: usize,
    simplices: Vec<[usize; 3]>,
    active: Vec<bool>,
    chunks: Vec<Chunk>,
    active_box: Option<(Vec<f64>, Vec<f64>)>,
    near: Vec<Vec<usize>>,
    local: Vec<Vec<usize>>,
    patch_interior: Vec<Vec<bool>>,
}

/// Extends `beta` (one vector per sample) to an ambient field over the
/// tubular neighbourhood `tube`.
pub fn globalize(
    m: &EmbeddedManifold,
    beta: &NormalFrame,
    tube: &TubularNeighbourhood,
) -> Result<AmbientField, FieldError> {
    if beta.len() != m.len() {
        return Err(FieldError::SampleCountMismatch {
            expected: m.len(),
            found: beta.len(),
        });
    }
    if !(tube.radius > 0.0) {
        return Err(FieldError::InvalidParameter(format!(
            "tubular radius must be positive, got {}",
            tube.radius
        )));
    }
    let up = m.split().up();
    let beta: Vec<Vector> = beta.field(0);
    let (arity, simplices): (usize, Vec<[usize; 3]>) = match m.topology() {
        Topology::Polyline { .. } => (2, m.segments().into_iter().map(|[a, b]| [a, b, b]).collect()),
        Topology::Grid { .. } => (3, m.triangles()),
    };
    let active: Vec<bool> = simplices
        .iter()
        .map(|s| s[..arity].iter().any(|&i| beta[i] != up))
        .collect();
    let dim = m.ambient_dim();
    let positions = m.positions().to_vec();
    let bbox = |ids: &mut dyn Iterator<Item = usize>| {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for i in ids {
            for k in 0..dim {
                lo[k] = lo[k].min(positions[i][k]);
                hi[k] = hi[k].max(positions[i][k]);
            }
        }
        (lo, hi)
    };
    let chunks = (0..simplices.len())
        .step_by(CHUNK)
        .map(|start| {
            let range = start..(start + CHUNK).min(simplices.len());
            let (lo, hi) = bbox(&mut range.clone().flat_map(|s| simplices[s][..arity].to_vec()));
            Chunk { lo, hi, range }
        })
        .collect();
    let active_box = if active.iter().any(|&a| a) {
        let ids: Vec<usize> = simplices
            .iter()
            .zip(&active)
            .filter(|(_, &a)| a)
            .flat_map(|(s, _)| s[..arity].to_vec())
            .collect();
        Some(bbox(&mut ids.into_iter()))
    } else {
        None
    };
    let near = m.intrinsic_balls(tube.locality);
    let (local, patch_interior) = if tube.immersed {
        let mut local = Vec::with_capacity(m.len());
        let mut interior = Vec::with_capacity(m.len());
        let adj = m.neighbours();
        for ball in &near {
            let inside = |i: usize| ball.binary_search(&i).is_ok();
            local.push(
                simplices
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s[..arity].iter().all(|&i| inside(i)))
                    .map(|(k, _)| k)
                    .collect(),
            );
            interior.push(
                ball.iter()
                    .map(|&i| adj[i].iter().all(|&j| inside(j)))
                    .collect(),
            );
        }
        (local, interior)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(AmbientField {
        positions,
        beta,
        up,
        radius: tube.radius,
        locality: tube.locality,
        immersed: tube.immersed,
        arity,
        simplices,
        active,
        chunks,
        active_box,
        near,
        local,
        patch_interior,
    })
}

impl AmbientField {
    pub fn up(&self) -> &Vector {
        &self.up
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn locality(&self) -> f64 {
        self.locality
    }

    pub fn is_immersed(&self) -> bool {
        self.immersed
    }

    /// The field on the owner's samples.
    pub fn beta(&self) -> &[Vector] {
        &self.beta
    }

    /// Field value at `x` using the globally nearest foot on `M`.
    pub fn eval(&self, x: &Vector) -> Result<Vector, FieldError> {
        let xs = x.as_slice();
        if let Some((lo, hi)) = &self.active_box {
            let mut d = 0.0;
            for k in 0..xs.len() {
                let e = (lo[k] - xs[k]).max(xs[k] - hi[k]).max(0.0);
                d += e * e;
            }
            if d >= self.radius * self.radius {
                return Ok(self.up.clone());
            }
        } else {
            return Ok(self.up.clone());
        }
        let foot = self.nearest_foot(xs)?;
        Ok(self.value_at_foot(foot))
    }

    /// Field value at `x` seen from the sheet of sample `anchor`: only feet
    /// within the locality radius of `anchor` are considered.
    pub fn eval_local(&self, x: &Vector, anchor: usize) -> Result<Vector, FieldError> {
        if !self.immersed {
            return self.eval(x);
        }
        let xs = x.as_slice();
        let r2 = self.radius * self.radius;
        let mut best: Option<Foot> = None;
        for &s in &self.local[anchor] {
            let f = self.foot_on(s, xs);
            if f.dist2 < r2 && best.is_none_or(|b| f.dist2 < b.dist2) {
                best = Some(f);
            }
        }
        let Some(foot) = best else {
            return Ok(self.up.clone());
        };
        let simplex = &self.simplices[foot.simplex];
        let ball = &self.near[anchor];
        for (slot, &w) in foot.weights[..self.arity].iter().enumerate() {
            if w > 0.0 {
                let vertex = simplex[slot];
                let pos = ball.binary_search(&vertex).expect("local simplex vertex");
                if !self.patch_interior[anchor][pos] && w >= 1.0 && foot.dist2 > 0.0 {
                    return Err(FieldError::LocalFootOutOfPatch { anchor });
                }
            }
        }
        Ok(self.value_at_foot(Some(foot)))
    }

    /// `eval_local` for immersed owners, `eval` otherwise.
    pub fn eval_for(&self, x: &Vector, anchor: usize) -> Result<Vector, FieldError> {
        if self.immersed {
            self.eval_local(x, anchor)
        } else {
            self.eval(x)
        }
    }

    fn foot_on(&self, s: usize, x: &[f64]) -> Foot {
        let simplex = &self.simplices[s];
        if self.arity == 2 {
            let (t, dist2) = closest_on_segment(
                x,
                self.positions[simplex[0]].as_slice(),
                self.positions[simplex[1]].as_slice(),
            );
            Foot {
                simplex: s,
                weights: [1.0 - t, t, 0.0],
                dist2,
            }
        } else {
            let (weights, dist2) = closest_on_triangle(
                x,
                self.positions[simplex[0]].as_slice(),
                self.positions[simplex[1]].as_slice(),
                self.positions[simplex[2]].as_slice(),
            );
            Foot {
                simplex: s,
                weights,
                dist2,
            }
        }
    }

    fn nearest_foot(&self, x: &[f64]) -> Result<Option<Foot>, FieldError> {
        let r2 = self.radius * self.radius;
        let tol = 1e-9 * self.radius;
        let mut best: Option<Foot> = None;
        let mut candidates: Vec<Foot> = Vec::new();
        let bound = |best: &Option<Foot>| -> f64 {
            match best {
                Some(b) => {
                    let d = b.dist2.sqrt() + tol;
                    (d * d).min(r2)
                }
                None => r2,
            }
        };
        for chunk in &self.chunks {
            if chunk.dist2(x) >= bound(&best) {
                continue;
            }
            for s in chunk.range.clone() {
                let f = self.foot_on(s, x);
                if f.dist2 < bound(&best) {
                    if best.is_none_or(|b| f.dist2 < b.dist2) {
                        best = Some(f);
                    }
                    candidates.push(f);
                }
            }
        }
        let Some(b) = best else {
            return Ok(None);
        };
        let bd = b.dist2.sqrt();
        let anchor = self.simplices[b.simplex][0];
        for c in &candidates {
            if (c.dist2.sqrt() - bd).abs() > tol {
                continue;
            }
            let far = self.simplices[c.simplex][..self.arity]
                .iter()
                .all(|&v| self.near[anchor].binary_search(&v).is_err());
            if far {
                return Err(FieldError::AmbiguousFoot {
                    a: anchor,
                    b: self.simplices[c.simplex][0],
                });
            }
        }
        Ok(Some(b))
    }

    fn value_at_foot(&self, foot: Option<Foot>) -> Vector {
        let Some(foot) = foot else {
            return self.up.clone();
        };
        if !self.active[foot.simplex] {
            return self.up.clone();
        }
        let simplex = &self.simplices[foot.simplex];
        let base = match foot.weights[..self.arity].iter().position(|&w| w == 1.0) {
            Some(slot) => self.beta[simplex[slot]].clone(),
            None => {
                let mut acc = Vector::zeros(self.up.len());
                for slot in 0..self.arity {
                    acc.axpy(foot.weights[slot], &self.beta[simplex[slot]], 1.0);
                }
                let n = acc.norm();
                if n < 1e-12 {
                    let slot = (0..self.arity)
                        .max_by(|&a, &b| foot.weights[a].total_cmp(&foot.weights[b]))
                        .unwrap_or(0);
                    self.beta[simplex[slot]].clone()
                } else {
                    acc / n
                }
            }
        };
        let d = foot.dist2.sqrt() / self.radius;
        if d >= 1.0 {
            return self.up.clone();
        }
        let s = smooth::step(d);
        if s == 0.0 {
            return base;
        }
        let theta = super::angle_between(&base, &self.up);
        rotate_towards(&base, &self.up, s * theta).unwrap_or_else(|| self.up.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{upwards_rotate, NormalFrame};
    use crate::geometry::{estimate_tangent_frame, AmbientSplit, ReachOptions};
    use std::f64::consts::FRAC_PI_2;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn line_with_field(beta: Vector) -> (EmbeddedManifold, AmbientField) {
        let split = AmbientSplit::new(2, 1, 0).unwrap();
        let pts = (0..=40).map(|i| v(&[i as f64 * 0.05, 0.0, 0.0])).collect();
        let m = EmbeddedManifold::polyline(pts, false, split).unwrap();
        let t = estimate_tangent_frame(&m).unwrap();
        let tube = TubularNeighbourhood::new(&m, &t, 0.2, ReachOptions::defaults_for(&m)).unwrap();
        let frame = NormalFrame::new(vec![vec![beta]; m.len()], false).unwrap();
        let field = globalize(&m, &frame, &tube).unwrap();
        (m, field)
    }

    #[test]
    fn vertical_outside_tube_and_beta_on_samples() {
        let (m, field) = line_with_field(v(&[0.0, 1.0, 0.0]));
        assert_eq!(field.eval(&v(&[1.0, 0.0, 0.5])).unwrap(), v(&[0.0, 0.0, 1.0]));
        assert_eq!(field.eval(&v(&[1.0, 0.2, 0.0])).unwrap(), v(&[0.0, 0.0, 1.0]));
        for i in [0, 7, 40] {
            assert_eq!(field.eval(m.position(i)).unwrap(), v(&[0.0, 1.0, 0.0]));
        }
    }

    #[test]
    fn half_radius_rotates_by_half_the_angle() {
        // beta horizontal (sideways); at d = 1/2 the ramp is exactly 1/2
        let (_, field) = line_with_field(v(&[0.0, 1.0, 0.0]));
        let g = field.eval(&v(&[1.0, 0.0, -0.1])).unwrap();
        let expected_elev = smooth::step(0.5) * FRAC_PI_2;
        assert!((g[2].asin() - expected_elev).abs() < 1e-12);
        assert!(g[0].abs() < 1e-15);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotated_field_is_continuous_along_fibre() {
        let split = AmbientSplit::new(2, 1, 0).unwrap();
        let frame = NormalFrame::new(vec![vec![v(&[0.0, 1.0, 0.0])]], true).unwrap();
        let beta = upwards_rotate(&frame, split, 0.3, 0.0).unwrap();
        assert!((beta.vector(0, 0)[2].asin() - (FRAC_PI_2 - 0.3)).abs() < 1e-12);
    }
}
