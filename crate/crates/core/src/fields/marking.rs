use serde::{Deserialize, Serialize};

use super::{angle_between, slerp, FieldError, NormalFrame};
use crate::geometry::{EmbeddedManifold, TangentFrame};
use crate::Vector;

/// Per-sample tangential projection of the vertical (the gradient of height).
pub fn gradient_field(m: &EmbeddedManifold, tangents: &TangentFrame) -> Vec<Vector> {
    let up = m.split().up();
    (0..m.len()).map(|i| tangents.tangent_component(i, &up)).collect()
}

/// The upmost unit normal at each sample; `None` where the normal space is
/// horizontal to within `1e-9`.
pub fn upmost_field(m: &EmbeddedManifold, tangents: &TangentFrame) -> Vec<Option<Vector>> {
    let up = m.split().up();
    (0..m.len())
        .map(|i| {
            let w = tangents.normal_component(i, &up);
            let n = w.norm();
            (n > 1e-9).then(|| w / n)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Plain,
    Horizontal,
    Downset,
    InnerNbhd,
    Nbhd,
    V,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Plain => "plain",
            Label::Horizontal => "H",
            Label::Downset => "D",
            Label::InnerNbhd => "U'",
            Label::Nbhd => "U",
            Label::V => "V",
        }
    }
}

/// Membership flags for the horizontal set `H`, the downset `D`, the
/// neighbourhoods `U' ⊂ U` of `H`, and the neighbourhood `V` of `D - U'`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetMarking {
    pub h: Vec<bool>,
    pub d: Vec<bool>,
    pub u_inner: Vec<bool>,
    pub u: Vec<bool>,
    pub v: Vec<bool>,
}

impl SubsetMarking {
    pub fn empty(len: usize) -> Self {
        Self {
            h: vec![false; len],
            d: vec![false; len],
            u_inner: vec![false; len],
            u: vec![false; len],
            v: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Membership in `W = U ∪ V`.
    pub fn in_w(&self, i: usize) -> bool {
        self.u[i] || self.v[i]
    }

    /// `D - U'`: the part of the downset the local flow has to handle.
    pub fn d_outside_inner(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.d[i] && !self.u_inner[i]).collect()
    }

    pub fn count(flags: &[bool]) -> usize {
        flags.iter().filter(|&&f| f).count()
    }

    /// The most specific label of each sample.
    pub fn label(&self, i: usize) -> Label {
        if self.h[i] {
            Label::Horizontal
        } else if self.d[i] {
            Label::Downset
        } else if self.u_inner[i] {
            Label::InnerNbhd
        } else if self.u[i] {
            Label::Nbhd
        } else if self.v[i] {
            Label::V
        } else {
            Label::Plain
        }
    }

    /// Checks `H ⊆ U' ⊆ U` and `D - U ⊆ V`.
    pub fn check(&self) -> Result<(), String> {
        for i in 0..self.len() {
            if self.h[i] && !self.u_inner[i] {
                return Err(format!("sample {i} is horizontal but outside U'"));
            }
            if self.u_inner[i] && !self.u[i] {
                return Err(format!("sample {i} is in U' but not in U"));
            }
            if self.d[i] && !self.u[i] && !self.v[i] {
                return Err(format!("sample {i} is in the downset but outside U and V"));
            }
        }
        Ok(())
    }

    /// `sample,label` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,label\n");
        for i in 0..self.len() {
            out.push_str(&format!("{i},{}\n", self.label(i).as_str()));
        }
        out
    }
}

/// Marks samples whose tangent space contains the vertical to within `tol`
/// radians.
pub fn horizontal_set(m: &EmbeddedManifold, tangents: &TangentFrame, tol: f64) -> SubsetMarking {
    let phi = gradient_field(m, tangents);
    let mut marking = SubsetMarking::empty(m.len());
    let threshold = tol.cos();
    for (i, p) in phi.iter().enumerate() {
        marking.h[i] = p.norm() >= threshold;
    }
    marking
}

fn dilate(m: &EmbeddedManifold, seed: &[bool], steps: usize) -> Vec<bool> {
    let adj = m.neighbours();
    let mut out = seed.to_vec();
    let mut frontier: Vec<usize> = (0..seed.len()).filter(|&i| seed[i]).collect();
    for _ in 0..steps {
        let mut next = Vec::new();
        for &i in &frontier {
            for &j in &adj[i] {
                if !out[j] {
                    out[j] = true;
                    next.push(j);
                }
            }
        }
        frontier = next;
    }
    out
}

/// Grows `U'` and `U` around `H` by the given number of adjacency steps.
pub fn mark_neighbourhoods(
    m: &EmbeddedManifold,
    marking: &SubsetMarking,
    inner_cells: usize,
    outer_cells: usize,
) -> SubsetMarking {
    let mut out = marking.clone();
    out.u_inner = dilate(m, &marking.h, inner_cells);
    out.u = dilate(m, &marking.h, outer_cells.max(inner_cells));
    out
}

/// Marks samples where field 0 is within `tol` radians of `-psi`. Samples in
/// `U'` or where `psi` is undefined are skipped; the latter join `U'`.
pub fn downset(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    alpha: &NormalFrame,
    marking: &SubsetMarking,
    tol: f64,
) -> Result<SubsetMarking, FieldError> {
    if !alpha.is_perpendicular() {
        return Err(FieldError::NotPerpendicular);
    }
    if alpha.len() != m.len() {
        return Err(FieldError::SampleCountMismatch {
            expected: m.len(),
            found: alpha.len(),
        });
    }
    let psi = upmost_field(m, tangents);
    let mut out = marking.clone();
    for i in 0..m.len() {
        out.d[i] = false;
        match &psi[i] {
            None => {
                out.u_inner[i] = true;
                out.u[i] = true;
            }
            Some(p) if !marking.u_inner[i] => {
                out.d[i] = angle_between(alpha.vector(i, 0), &(-p)) <= tol;
            }
            Some(_) => {}
        }
    }
    Ok(out)
}

/// Replaces field 0 by `psi` outside `W = U ∪ V` and interpolates along great
/// circles across a collar of intrinsic width `collar` inside `W`.
pub fn localise(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    alpha: &NormalFrame,
    marking: &SubsetMarking,
    collar: f64,
) -> Result<NormalFrame, FieldError> {
    if !alpha.is_perpendicular() {
        return Err(FieldError::NotPerpendicular);
    }
    if !(collar > 0.0) {
        return Err(FieldError::InvalidParameter(format!(
            "collar width must be positive, got {collar}"
        )));
    }
    let psi = upmost_field(m, tangents);
    let outside: Vec<bool> = (0..m.len()).map(|i| !marking.in_w(i)).collect();
    let dist = if outside.iter().any(|&o| o) {
        m.distance_to_set(&outside)
    } else {
        vec![f64::INFINITY; m.len()]
    };
    // D and U' keep the original field: the collar must fit outside them
    let inner = (0..m.len())
        .filter(|&i| marking.d[i] || marking.u_inner[i])
        .map(|i| dist[i])
        .fold(f64::INFINITY, f64::min);
    let collar = if inner > 0.0 { collar.min(inner) } else { collar };
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let a = alpha.vector(i, 0);
        let Some(p) = &psi[i] else {
            out.push(vec![a.clone()]);
            continue;
        };
        let w = (dist[i] / collar).min(1.0);
        let v = if w <= 0.0 {
            p.clone()
        } else if w >= 1.0 {
            a.clone()
        } else {
            if angle_between(a, &(-p)) < 1e-9 {
                return Err(FieldError::AntipodalCollar { sample: i });
            }
            slerp(p, a, w).ok_or(FieldError::AntipodalCollar { sample: i })?
        };
        out.push(vec![v]);
    }
    NormalFrame::new(out, true)
}
