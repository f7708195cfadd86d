//! Sampled manifolds in `Q x R^n`: polylines (m = 1) and rectangular
//! parameter grids (m = 2), their tangent frames, reach and projections.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vector;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid ambient split: {0}")]
    InvalidSplit(String),
    #[error("sample {index} has dimension {found}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("adjacent samples {a} and {b} coincide")]
    DegenerateSample { a: usize, b: usize },
    #[error("not enough samples: {0}")]
    TooFewSamples(String),
    #[error("self-intersection: samples {a} and {b} are {distance:e} apart")]
    SelfIntersection { a: usize, b: usize, distance: f64 },
    #[error("tubular radius {radius} is not admissible (reach {reach})")]
    InvalidRadius { radius: f64, reach: f64 },
}

/// Splits the ambient coordinates into `q` horizontal and `n` vertical ones.
/// The vertical coordinates come last; `vertical_axis` selects the one
/// currently treated as "up".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbientSplit {
    pub q: usize,
    pub n: usize,
    pub vertical_axis: usize,
}

impl AmbientSplit {
    pub fn new(q: usize, n: usize, vertical_axis: usize) -> Result<Self, GeometryError> {
        if q < 1 || n < 1 {
            return Err(GeometryError::InvalidSplit(format!(
                "need q >= 1 and n >= 1, got q = {q}, n = {n}"
            )));
        }
        if vertical_axis >= n {
            return Err(GeometryError::InvalidSplit(format!(
                "vertical axis {vertical_axis} out of range for n = {n}"
            )));
        }
        Ok(Self { q, n, vertical_axis })
    }

    pub fn dim(&self) -> usize {
        self.q + self.n
    }

    /// Ambient coordinate index of the current vertical direction.
    pub fn vertical_index(&self) -> usize {
        self.q + self.vertical_axis
    }

    /// Unit vector `u` along the current vertical axis.
    pub fn up(&self) -> Vector {
        let mut u = Vector::zeros(self.dim());
        u[self.vertical_index()] = 1.0;
        u
    }

    pub fn with_vertical_axis(self, axis: usize) -> Result<Self, GeometryError> {
        Self::new(self.q, self.n, axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Topology {
    Polyline { closed: bool },
    /// Sample `(r, c)` is stored at index `r * cols + c`.
    Grid { rows: usize, cols: usize },
}

impl Topology {
    pub fn manifold_dim(&self) -> usize {
        match self {
            Topology::Polyline { .. } => 1,
            Topology::Grid { .. } => 2,
        }
    }
}

/// Result of the embedding test.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbeddingStatus {
    Embedded,
    Immersed { a: usize, b: usize, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedManifold {
    topology: Topology,
    params: Vec<Vec<f64>>,
    positions: Vec<Vector>,
    split: AmbientSplit,
    boundary: Vec<bool>,
}

impl EmbeddedManifold {
    /// Polyline through `positions`; parameters are cumulative chord lengths.
    pub fn polyline(
        positions: Vec<Vector>,
        closed: bool,
        split: AmbientSplit,
    ) -> Result<Self, GeometryError> {
        let mut params = Vec::with_capacity(positions.len());
        let mut s = 0.0;
        for i in 0..positions.len() {
            if i > 0 {
                s += (&positions[i] - &positions[i - 1]).norm();
            }
            params.push(vec![s]);
        }
        Self::from_parts(Topology::Polyline { closed }, params, positions, split, None)
    }

    /// Grid with `rows x cols` samples; parameters default to the integer indices.
    pub fn grid(
        rows: usize,
        cols: usize,
        positions: Vec<Vector>,
        split: AmbientSplit,
    ) -> Result<Self, GeometryError> {
        let params = (0..rows * cols)
            .map(|i| vec![(i / cols.max(1)) as f64, (i % cols.max(1)) as f64])
            .collect();
        Self::from_parts(Topology::Grid { rows, cols }, params, positions, split, None)
    }

    pub fn from_parts(
        topology: Topology,
        params: Vec<Vec<f64>>,
        positions: Vec<Vector>,
        split: AmbientSplit,
        boundary: Option<Vec<bool>>,
    ) -> Result<Self, GeometryError> {
        let count = positions.len();
        match topology {
            Topology::Polyline { closed } => {
                let min = if closed { 3 } else { 2 };
                if count < min {
                    return Err(GeometryError::TooFewSamples(format!(
                        "polyline needs at least {min} samples, got {count}"
                    )));
                }
            }
            Topology::Grid { rows, cols } => {
                if rows < 2 || cols < 2 || rows * cols != count {
                    return Err(GeometryError::TooFewSamples(format!(
                        "grid {rows}x{cols} does not match {count} samples"
                    )));
                }
            }
        }
        if params.len() != count {
            return Err(GeometryError::TooFewSamples(format!(
                "{} parameter rows for {count} samples",
                params.len()
            )));
        }
        let dim = split.dim();
        for (index, p) in positions.iter().enumerate() {
            if p.len() != dim {
                return Err(GeometryError::DimensionMismatch {
                    index,
                    expected: dim,
                    found: p.len(),
                });
            }
        }
        let boundary = boundary.unwrap_or_else(|| vec![false; count]);
        if boundary.len() != count {
            return Err(GeometryError::TooFewSamples(
                "boundary flags do not match sample count".into(),
            ));
        }
        let manifold = Self {
            topology,
            params,
            positions,
            split,
            boundary,
        };
        for (a, b) in manifold.edges() {
            if (&manifold.positions[a] - &manifold.positions[b]).norm() < 1e-12 {
                return Err(GeometryError::DegenerateSample { a, b });
            }
        }
        Ok(manifold)
    }

    /// Same topology and parameters, new positions (used for flow snapshots).
    pub fn with_positions(&self, positions: Vec<Vector>) -> Result<Self, GeometryError> {
        Self::from_parts(
            self.topology,
            self.params.clone(),
            positions,
            self.split,
            Some(self.boundary.clone()),
        )
    }

    pub fn with_split(mut self, split: AmbientSplit) -> Result<Self, GeometryError> {
        if split.dim() != self.split.dim() {
            return Err(GeometryError::InvalidSplit(format!(
                "split dimension {} does not match ambient dimension {}",
                split.dim(),
                self.split.dim()
            )));
        }
        self.split = split;
        Ok(self)
    }

    pub fn with_boundary(mut self, boundary: Vec<bool>) -> Result<Self, GeometryError> {
        if boundary.len() != self.len() {
            return Err(GeometryError::TooFewSamples(
                "boundary flags do not match sample count".into(),
            ));
        }
        self.boundary = boundary;
        Ok(self)
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn split(&self) -> AmbientSplit {
        self.split
    }

    pub fn positions(&self) -> &[Vector] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> &Vector {
        &self.positions[i]
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn boundary(&self) -> &[bool] {
        &self.boundary
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn manifold_dim(&self) -> usize {
        self.topology.manifold_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.split.dim()
    }

    /// `dim Q' - m` where `Q'` is everything but the current vertical axis.
    pub fn horizontal_codimension(&self) -> isize {
        self.ambient_dim() as isize - 1 - self.manifold_dim() as isize
    }

    pub fn height(&self, i: usize) -> f64 {
        self.positions[i][self.split.vertical_index()]
    }

    pub fn height_span(&self) -> f64 {
        let (lo, hi) = (0..self.len()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
            let h = self.height(i);
            (lo.min(h), hi.max(h))
        });
        hi - lo
    }

    pub fn bounding_diagonal(&self) -> f64 {
        let dim = self.ambient_dim();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for p in &self.positions {
            for k in 0..dim {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        lo.iter()
            .zip(&hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    pub fn grid_index(&self, r: usize, c: usize) -> usize {
        match self.topology {
            Topology::Grid { cols, .. } => r * cols + c,
            Topology::Polyline { .. } => c,
        }
    }

    /// Adjacent sample pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        match self.topology {
            Topology::Polyline { closed } => {
                let n = self.len();
                let mut e: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
                if closed {
                    e.push((n - 1, 0));
                }
                e
            }
            Topology::Grid { rows, cols } => {
                let mut e = Vec::with_capacity(2 * rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        if c + 1 < cols {
                            e.push((i, i + 1));
                        }
                        if r + 1 < rows {
                            e.push((i, i + cols));
                        }
                    }
                }
                e
            }
        }
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.len()];
        for (a, b) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn edge_lengths(&self) -> impl Iterator<Item = f64> + '_ {
        self.edges()
            .into_iter()
            .map(move |(a, b)| (&self.positions[a] - &self.positions[b]).norm())
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edge_lengths().fold(0.0, f64::max)
    }

    pub fn min_edge_length(&self) -> f64 {
        self.edge_lengths().fold(f64::INFINITY, f64::min)
    }

    /// Segments for polylines, empty for grids.
    pub fn segments(&self) -> Vec<[usize; 2]> {
        match self.topology {
            Topology::Polyline { .. } => self.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            Topology::Grid { .. } => Vec::new(),
        }
    }

    /// Two triangles per grid cell, empty for polylines.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        match self.topology {
            Topology::Polyline { .. } => Vec::new(),
            Topology::Grid { rows, cols } => {
                let mut t = Vec::with_capacity(2 * (rows - 1) * (cols - 1));
                for r in 0..rows - 1 {
                    for c in 0..cols - 1 {
                        let i = r * cols + c;
                        t.push([i, i + 1, i + cols]);
                        t.push([i + 1, i + cols + 1, i + cols]);
                    }
                }
                t
            }
        }
    }

    /// Graph distances (along edges) from `source`, up to `radius`.
    pub fn intrinsic_ball(&self, source: usize, radius: f64) -> Vec<(usize, f64)> {
        let adj = self.neighbours();
        let mut dist = vec![f64::INFINITY; self.len()];
        dijkstra(&self.positions, &adj, &[source], radius, &mut dist);
        dist.iter()
            .enumerate()
            .filter(|(_, d)| d.is_finite())
            .map(|(i, &d)| (i, d))
            .collect()
    }

    /// For every sample, the sorted list of samples within intrinsic distance `radius`.
    pub fn intrinsic_balls(&self, radius: f64) -> Vec<Vec<usize>> {
        let adj = self.neighbours();
        let mut dist = vec![f64::INFINITY; self.len()];
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let touched = dijkstra(&self.positions, &adj, &[i], radius, &mut dist);
            let mut ball: Vec<usize> = touched.iter().copied().filter(|&j| dist[j] <= radius).collect();
            ball.sort_unstable();
            ball.dedup();
            for &j in &touched {
                dist[j] = f64::INFINITY;
            }
            out.push(ball);
        }
        out
    }

    /// Intrinsic distance from every sample to the nearest sample with `mask` set.
    pub fn distance_to_set(&self, mask: &[bool]) -> Vec<f64> {
        let adj = self.neighbours();
        let sources: Vec<usize> = (0..self.len()).filter(|&i| mask[i]).collect();
        let mut dist = vec![f64::INFINITY; self.len()];
        dijkstra(&self.positions, &adj, &sources, f64::INFINITY, &mut dist);
        dist
    }

    /// Minimum distance between parts of `M` that are more than `locality`
    /// apart intrinsically: segment pairs for curves, sample pairs for grids.
    pub fn separation(&self, locality: f64) -> Option<(usize, usize, f64)> {
        let balls = self.intrinsic_balls(locality);
        let near = |a: usize, b: usize| balls[a].binary_search(&b).is_ok();
        let mut best: Option<(usize, usize, f64)> = None;
        match self.topology {
            Topology::Polyline { .. } => {
                let segs = self.segments();
                for (s, sa) in segs.iter().enumerate() {
                    for sb in &segs[s + 1..] {
                        if sa.iter().any(|&a| sb.iter().any(|&b| near(a, b))) {
                            continue;
                        }
                        let d = segment_segment_distance(
                            &self.positions[sa[0]],
                            &self.positions[sa[1]],
                            &self.positions[sb[0]],
                            &self.positions[sb[1]],
                        );
                        if best.map_or(true, |(_, _, bd)| d < bd) {
                            best = Some((sa[0], sb[0], d));
                        }
                    }
                }
            }
            Topology::Grid { .. } => {
                for a in 0..self.len() {
                    for b in a + 1..self.len() {
                        if near(a, b) {
                            continue;
                        }
                        let d = (&self.positions[a] - &self.positions[b]).norm();
                        if best.map_or(true, |(_, _, bd)| d < bd) {
                            best = Some((a, b, d));
                        }
                    }
                }
            }
        }
        best
    }

    /// Embedded unless two intrinsically distant parts come within `tolerance`.
    pub fn embedding_status(&self, locality: f64, tolerance: f64) -> EmbeddingStatus {
        match self.separation(locality) {
            Some((a, b, distance)) if distance < tolerance => {
                EmbeddingStatus::Immersed { a, b, distance }
            }
            _ => EmbeddingStatus::Embedded,
        }
    }

    /// Default locality radius: three times the longest edge.
    pub fn default_locality(&self) -> f64 {
        3.0 * self.max_edge_length()
    }

    /// Default self-intersection tolerance.
    pub fn default_embedding_tolerance(&self) -> f64 {
        1e-9 * (1.0 + self.bounding_diagonal())
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded multi-source Dijkstra; returns every sample whose distance was set.
fn dijkstra(
    positions: &[Vector],
    adj: &[Vec<usize>],
    sources: &[usize],
    radius: f64,
    dist: &mut [f64],
) -> Vec<usize> {
    let mut heap = BinaryHeap::new();
    let mut touched = Vec::new();
    for &s in sources {
        dist[s] = 0.0;
        touched.push(s);
        heap.push(HeapItem(0.0, s));
    }
    while let Some(HeapItem(d, i)) = heap.pop() {
        if d > dist[i] {
            continue;
        }
        for &j in &adj[i] {
            let nd = d + (&positions[i] - &positions[j]).norm();
            if nd <= radius && nd < dist[j] {
                if dist[j].is_infinite() {
                    touched.push(j);
                }
                dist[j] = nd;
                heap.push(HeapItem(nd, j));
            }
        }
    }
    touched
}

/// Orthonormal tangent basis (m vectors) at every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentFrame {
    basis: Vec<Vec<Vector>>,
}

impl TangentFrame {
    pub fn basis(&self, i: usize) -> &[Vector] {
        &self.basis[i]
    }

    pub fn len(&self) -> usize {
        self.basis.len()
    }

    pub fn is_empty(&self) -> bool {
        self.basis.is_empty()
    }

    pub fn tangent_component(&self, i: usize, v: &Vector) -> Vector {
        let mut out = Vector::zeros(v.len());
        for t in &self.basis[i] {
            out.axpy(t.dot(v), t, 1.0);
        }
        out
    }

    pub fn normal_component(&self, i: usize, v: &Vector) -> Vector {
        v - self.tangent_component(i, v)
    }

    /// Angle between `v` and the tangent space at sample `i`, in `[0, pi/2]`.
    pub fn angle_to_tangent(&self, i: usize, v: &Vector) -> f64 {
        let t = self.tangent_component(i, v).norm();
        let n = (v - self.tangent_component(i, v)).norm();
        n.atan2(t)
    }
}

/// Second-order three-point derivative weights at position `at` (0, 1 or 2)
/// for samples spaced `h1` then `h2`.
fn three_point_weights(h1: f64, h2: f64, at: usize) -> [f64; 3] {
    let s = h1 + h2;
    match at {
        0 => [-(2.0 * h1 + h2) / (h1 * s), s / (h1 * h2), -h1 / (h2 * s)],
        1 => [-h2 / (h1 * s), (h2 - h1) / (h1 * h2), h1 / (h2 * s)],
        _ => [h2 / (h1 * s), -s / (h1 * h2), (h1 + 2.0 * h2) / (h2 * s)],
    }
}

/// Derivative along a chain of samples at chain position `k`.
fn chain_derivative(
    positions: &[Vector],
    chain: &[usize],
    k: usize,
    closed: bool,
) -> Result<Vector, GeometryError> {
    let n = chain.len();
    let p = |j: usize| &positions[chain[j]];
    let gap = |a: usize, b: usize| -> Result<f64, GeometryError> {
        let d = (p(a) - p(b)).norm();
        if d < 1e-12 {
            Err(GeometryError::DegenerateSample {
                a: chain[a],
                b: chain[b],
            })
        } else {
            Ok(d)
        }
    };
    if n == 2 {
        gap(0, 1)?;
        return Ok(p(1) - p(0));
    }
    let (idx, at) = if closed {
        ([(k + n - 1) % n, k, (k + 1) % n], 1)
    } else if k == 0 {
        ([0, 1, 2], 0)
    } else if k == n - 1 {
        ([n - 3, n - 2, n - 1], 2)
    } else {
        ([k - 1, k, k + 1], 1)
    };
    let h1 = gap(idx[0], idx[1])?;
    let h2 = gap(idx[1], idx[2])?;
    let w = three_point_weights(h1, h2, at);
    Ok(p(idx[0]) * w[0] + p(idx[1]) * w[1] + p(idx[2]) * w[2])
}

/// Tangent frames by second-order finite differences (one-sided at
/// boundaries), orthonormalised by Gram-Schmidt.
pub fn estimate_tangent_frame(m: &EmbeddedManifold) -> Result<TangentFrame, GeometryError> {
    let positions = m.positions();
    match m.topology() {
        Topology::Polyline { closed } => {
            let chain: Vec<usize> = (0..m.len()).collect();
            let mut basis = Vec::with_capacity(m.len());
            for k in 0..m.len() {
                let d = chain_derivative(positions, &chain, k, closed)?;
                basis.push(vec![d.normalize()]);
            }
            Ok(TangentFrame { basis })
        }
        Topology::Grid { rows, cols } => {
            let mut basis = Vec::with_capacity(m.len());
            for r in 0..rows {
                let row: Vec<usize> = (0..cols).map(|c| r * cols + c).collect();
                for c in 0..cols {
                    let col: Vec<usize> = (0..rows).map(|rr| rr * cols + c).collect();
                    let du = chain_derivative(positions, &col, r, false)?;
                    let dv = chain_derivative(positions, &row, c, false)?;
                    let t1 = du.normalize();
                    let w = &dv - &t1 * t1.dot(&dv);
                    if w.norm() < 1e-12 * dv.norm().max(1e-300) {
                        return Err(GeometryError::DegenerateSample {
                            a: r * cols + c,
                            b: r * cols + c,
                        });
                    }
                    basis.push(vec![t1, w.normalize()]);
                }
            }
            Ok(TangentFrame { basis })
        }
    }
}

/// Options for [`discrete_reach`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachOptions {
    pub locality: f64,
    pub tolerance: f64,
}

impl ReachOptions {
    pub fn defaults_for(m: &EmbeddedManifold) -> Self {
        Self {
            locality: m.default_locality(),
            tolerance: m.default_embedding_tolerance(),
        }
    }
}

/// Discrete reach: the admissible tubular radius.
///
/// Uses the two-point formula `|q - p|^2 / (2 dist(q - p, T_p M))` minimised
/// over sample pairs, which sees both curvature and bottlenecks. Fails with
/// `SelfIntersection` when intrinsically distant parts of `M` come closer than
/// `opts.tolerance`.
pub fn discrete_reach(
    m: &EmbeddedManifold,
    tangents: &TangentFrame,
    opts: ReachOptions,
) -> Result<f64, GeometryError> {
    if let EmbeddingStatus::Immersed { a, b, distance } =
        m.embedding_status(opts.locality, opts.tolerance)
    {
        return Err(GeometryError::SelfIntersection { a, b, distance });
    }
    let pts = m.positions();
    let mut reach = f64::INFINITY;
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i == j {
                continue;
            }
            let d = &pts[j] - &pts[i];
            let normal = tangents.normal_component(i, &d).norm();
            if normal <= 1e-14 * d.norm() {
                continue;
            }
            reach = reach.min(d.norm_squared() / (2.0 * normal));
        }
    }
    Ok(reach)
}

/// Squared distance from `x` to segment `[a, b]` and the segment parameter.
pub(crate) fn closest_on_segment(x: &[f64], a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut ab2 = 0.0;
    let mut dot = 0.0;
    for k in 0..x.len() {
        let ab = b[k] - a[k];
        ab2 += ab * ab;
        dot += (x[k] - a[k]) * ab;
    }
    let t = if ab2 > 0.0 { (dot / ab2).clamp(0.0, 1.0) } else { 0.0 };
    let mut d2 = 0.0;
    for k in 0..x.len() {
        let c = a[k] + t * (b[k] - a[k]) - x[k];
        d2 += c * c;
    }
    (t, d2)
}

/// Closest point of a triangle to `x`, as barycentric weights, plus the
/// squared distance. Only dot products are used, so any dimension works.
pub(crate) fn closest_on_triangle(x: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> ([f64; 3], f64) {
    let dot = |u: &dyn Fn(usize) -> f64, v: &dyn Fn(usize) -> f64| -> f64 {
        (0..x.len()).map(|k| u(k) * v(k)).sum()
    };
    let ab = |k: usize| b[k] - a[k];
    let ac = |k: usize| c[k] - a[k];
    let ap = |k: usize| x[k] - a[k];
    let bp = |k: usize| x[k] - b[k];
    let cp = |k: usize| x[k] - c[k];
    let d1 = dot(&ab, &ap);
    let d2 = dot(&ac, &ap);
    let w = if d1 <= 0.0 && d2 <= 0.0 {
        [1.0, 0.0, 0.0]
    } else {
        let d3 = dot(&ab, &bp);
        let d4 = dot(&ac, &bp);
        if d3 >= 0.0 && d4 <= d3 {
            [0.0, 1.0, 0.0]
        } else {
            let vc = d1 * d4 - d3 * d2;
            if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
                let v = d1 / (d1 - d3);
                [1.0 - v, v, 0.0]
            } else {
                let d5 = dot(&ab, &cp);
                let d6 = dot(&ac, &cp);
                if d6 >= 0.0 && d5 <= d6 {
                    [0.0, 0.0, 1.0]
                } else {
                    let vb = d5 * d2 - d1 * d6;
                    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
                        let t = d2 / (d2 - d6);
                        [1.0 - t, 0.0, t]
                    } else {
                        let va = d3 * d6 - d5 * d4;
                        if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
                            let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
                            [0.0, 1.0 - t, t]
                        } else {
                            let denom = 1.0 / (va + vb + vc);
                            let v = vb * denom;
                            let t = vc * denom;
                            [1.0 - v - t, v, t]
                        }
                    }
                }
            }
        }
    };
    let mut d2sum = 0.0;
    for k in 0..x.len() {
        let p = w[0] * a[k] + w[1] * b[k] + w[2] * c[k] - x[k];
        d2sum += p * p;
    }
    (w, d2sum)
}

/// Distance between segments `[p1, q1]` and `[p2, q2]` in any dimension.
pub fn segment_segment_distance(p1: &Vector, q1: &Vector, p2: &Vector, q2: &Vector) -> f64 {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= 1e-300 && e <= 1e-300 {
        return r.norm();
    }
    if a <= 1e-300 {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= 1e-300 {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-300 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (c1 - c2).norm()
}

/// Vertical projection of a manifold: the current vertical coordinate dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub topology: Topology,
    pub params: Vec<Vec<f64>>,
    pub positions: Vec<Vector>,
    /// Ambient index of the dropped coordinate.
    pub dropped: usize,
    /// The split of the manifold that was projected.
    pub source_split: AmbientSplit,
}

impl Projection {
    /// Re-embed with the given heights inserted back at the dropped coordinate.
    pub fn lift(&self, heights: &[f64]) -> Result<EmbeddedManifold, GeometryError> {
        let positions = self
            .positions
            .iter()
            .zip(heights)
            .map(|(p, &h)| p.clone().insert_row(self.dropped, h))
            .collect();
        EmbeddedManifold::from_parts(
            self.topology,
            self.params.clone(),
            positions,
            self.source_split,
            None,
        )
    }

    /// The projection as a manifold in `Q x R^{n-1}`, when `n >= 2`.
    pub fn into_manifold(self, split: AmbientSplit) -> Result<EmbeddedManifold, GeometryError> {
        EmbeddedManifold::from_parts(self.topology, self.params, self.positions, split, None)
    }
}

/// Drops the current vertical coordinate of every sample.
pub fn project_to_q(m: &EmbeddedManifold) -> Projection {
    let dropped = m.split().vertical_index();
    Projection {
        topology: m.topology(),
        params: m.params().to_vec(),
        positions: m
            .positions()
            .iter()
            .map(|p| p.clone().remove_row(dropped))
            .collect(),
        dropped,
        source_split: m.split(),
    }
}

/// A tubular neighbourhood of radius `radius` around a sampled manifold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubularNeighbourhood {
    pub radius: f64,
    /// Intrinsic radius defining which samples count as "the same sheet".
    pub locality: f64,
    /// When set, fibres only need to be disjoint within `locality`.
    pub immersed: bool,
}

impl TubularNeighbourhood {
    /// Checks `radius` against the discrete reach; immersed owners are
    /// accepted with local semantics.
    pub fn new(
        m: &EmbeddedManifold,
        tangents: &TangentFrame,
        radius: f64,
        opts: ReachOptions,
    ) -> Result<Self, GeometryError> {
        if !(radius > 0.0) {
            return Err(GeometryError::InvalidRadius {
                radius,
                reach: f64::NAN,
            });
        }
        match discrete_reach(m, tangents, opts) {
            Ok(reach) if radius <= reach => Ok(Self {
                radius,
                locality: opts.locality,
                immersed: false,
            }),
            Ok(reach) => Err(GeometryError::InvalidRadius { radius, reach }),
            Err(GeometryError::SelfIntersection { .. }) => Ok(Self {
                radius,
                locality: opts.locality,
                immersed: true,
            }),
            Err(e) => Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn circle(n: usize) -> EmbeddedManifold {
        let split = AmbientSplit::new(2, 1, 0).unwrap();
        let pts = (0..n)
            .map(|i| {
                let t = TAU * i as f64 / n as f64;
                v(&[t.cos(), t.sin(), 0.0])
            })
            .collect();
        EmbeddedManifold::polyline(pts, true, split).unwrap()
    }

    #[test]
    fn split_validation() {
        assert!(AmbientSplit::new(0, 1, 0).is_err());
        assert!(AmbientSplit::new(2, 0, 0).is_err());
        assert!(AmbientSplit::new(2, 2, 2).is_err());
        let s = AmbientSplit::new(2, 2, 1).unwrap();
        assert_eq!(s.dim(), 4);
        assert_eq!(s.vertical_index(), 3);
        assert_eq!(s.up(), v(&[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn horizontal_segment_tangents_are_exact() {
        let split = AmbientSplit::new(1, 1, 0).unwrap();
        let pts = (0..=10).map(|i| v(&[i as f64 * 0.1, 0.0])).collect();
        let m = EmbeddedManifold::polyline(pts, false, split).unwrap();
        let t = estimate_tangent_frame(&m).unwrap();
        for i in 0..m.len() {
            assert!((&t.basis(i)[0] - v(&[1.0, 0.0])).norm() < 1e-12);
        }
    }

    #[test]
    fn circle_tangents_match_derivative() {
        let m = circle(256);
        let t = estimate_tangent_frame(&m).unwrap();
        for i in 0..m.len() {
            let th = TAU * i as f64 / 256.0;
            assert!((&t.basis(i)[0] - v(&[-th.sin(), th.cos(), 0.0])).norm() < 1e-3);
        }
    }

    #[test]
    fn two_sample_polyline_uses_chord() {
        let split = AmbientSplit::new(1, 1, 0).unwrap();
        let m = EmbeddedManifold::polyline(vec![v(&[0.0, 0.0]), v(&[3.0, 4.0])], false, split)
            .unwrap();
        let t = estimate_tangent_frame(&m).unwrap();
        assert!((&t.basis(0)[0] - v(&[0.6, 0.8])).norm() < 1e-15);
        assert!((&t.basis(1)[0] - v(&[0.6, 0.8])).norm() < 1e-15);
    }

    #[test]
    fn coincident_samples_are_rejected() {
        let split = AmbientSplit::new(1, 1, 0).unwrap();
        let err = EmbeddedManifold::polyline(
            vec![v(&[0.0, 0.0]), v(&[0.0, 0.0]), v(&[1.0, 0.0])],
            false,
            split,
        )
        .unwrap_err();
        assert_eq!(err, GeometryError::DegenerateSample { a: 0, b: 1 });
    }

    #[test]
    fn grid_tangent_frame_is_orthonormal() {
        let split = AmbientSplit::new(3, 1, 0).unwrap();
        let (rows, cols) = (7, 9);
        let pts = (0..rows * cols)
            .map(|i| {
                let (s, t) = ((i / cols) as f64 * 0.1, (i % cols) as f64 * 0.1);
                v(&[s, t, s * t, s * s - t])
            })
            .collect();
        let m = EmbeddedManifold::grid(rows, cols, pts, split).unwrap();
        let t = estimate_tangent_frame(&m).unwrap();
        for i in 0..m.len() {
            let b = t.basis(i);
            assert!((b[0].norm() - 1.0).abs() < 1e-12);
            assert!((b[1].norm() - 1.0).abs() < 1e-12);
            assert!(b[0].dot(&b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_lines_reach_half() {
        // two horizontal lines at vertical distance 1, closed by half circles
        let split = AmbientSplit::new(1, 1, 0).unwrap();
        let mut pts: Vec<Vector> = (0..=40).map(|i| v(&[i as f64 * 0.1, 0.0])).collect();
        for k in 1..32 {
            let a = -PI / 2.0 + PI * k as f64 / 32.0;
            pts.push(v(&[4.0 + 0.5 * a.cos(), 0.5 + 0.5 * a.sin()]));
        }
        pts.extend((0..=40).rev().map(|i| v(&[i as f64 * 0.1, 1.0])));
        for k in 1..32 {
            let a = PI / 2.0 + PI * k as f64 / 32.0;
            pts.push(v(&[0.5 * a.cos(), 0.5 + 0.5 * a.sin()]));
        }
        let m = EmbeddedManifold::polyline(pts, true, split).unwrap();
        let t = estimate_tangent_frame(&m).unwrap();
        let r = discrete_reach(&m, &t, ReachOptions::defaults_for(&m)).unwrap();
        assert!((r - 0.5).abs() < 5e-3, "reach {r}");
    }

    #[test]
    fn circle_reach_near_radius() {
        let m = circle(256);
        let t = estimate_tangent_frame(&m).unwrap();
        let opts = ReachOptions {
            locality: PI / 2.0,
            tolerance: 1e-9,
        };
        let r = discrete_reach(&m, &t, opts).unwrap();
        assert!((r - 1.0).abs() < 0.02, "reach {r}");
    }

    #[test]
    fn projection_drops_vertical() {
        let split = AmbientSplit::new(2, 1, 0).unwrap();
        let m = EmbeddedManifold::polyline(
            vec![v(&[1.0, 2.0, 3.0]), v(&[4.0, 5.0, 6.0])],
            false,
            split,
        )
        .unwrap();
        let p = project_to_q(&m);
        assert_eq!(p.positions[0], v(&[1.0, 2.0]));
        assert_eq!(p.positions[1], v(&[4.0, 5.0]));
    }

    #[test]
    fn segment_distance_cases() {
        let d = segment_segment_distance(
            &v(&[0.0, 0.0, 0.0]),
            &v(&[1.0, 0.0, 0.0]),
            &v(&[0.5, -1.0, 1.0]),
            &v(&[0.5, 1.0, 1.0]),
        );
        assert!((d - 1.0).abs() < 1e-15);
        let d = segment_segment_distance(
            &v(&[0.0, 0.0]),
            &v(&[1.0, 0.0]),
            &v(&[2.0, 0.0]),
            &v(&[3.0, 0.0]),
        );
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn triangle_closest_point_regions() {
        let a = [0.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0];
        let c = [0.0, 1.0, 0.0];
        let (w, d2) = closest_on_triangle(&[0.25, 0.25, 2.0], &a, &b, &c);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
        assert!((d2 - 4.0).abs() < 1e-15);
        let (w, _) = closest_on_triangle(&[-1.0, -1.0, 0.0], &a, &b, &c);
        assert_eq!(w, [1.0, 0.0, 0.0]);
        let (w, d2) = closest_on_triangle(&[1.0, 1.0, 0.0], &a, &b, &c);
        assert!((w[1] - 0.5).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15);
        assert!((d2 - 0.5).abs() < 1e-15);
    }
}
