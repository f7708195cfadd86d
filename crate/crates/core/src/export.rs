//! Plain-text artifact writers: CSV sample dumps, SVG orthographic views of
//! curves and OBJ meshes of surfaces.

use std::fmt::Write as _;

use crate::fields::NormalFrame;
use crate::geometry::{EmbeddedManifold, Topology};

/// One row per sample: index, parameter coordinates, position coordinates.
pub fn samples_csv(m: &EmbeddedManifold) -> String {
    let pdim = m.params().first().map_or(0, |p| p.len());
    let mut out = String::from("sample");
    for j in 0..pdim {
        let _ = write!(out, ",p{j}");
    }
    for j in 0..m.ambient_dim() {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for i in 0..m.len() {
        let _ = write!(out, "{i}");
        for v in &m.params()[i] {
            let _ = write!(out, ",{v}");
        }
        for v in m.position(i).iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Field vectors per sample, `k` blocks of ambient coordinates.
pub fn frame_csv(frame: &NormalFrame) -> String {
    let mut out = String::from("sample");
    let dim = if frame.is_empty() { 0 } else { frame.vector(0, 0).len() };
    for j in 0..frame.k() {
        for c in 0..dim {
            let _ = write!(out, ",f{j}_{c}");
        }
    }
    out.push('\n');
    for i in 0..frame.len() {
        let _ = write!(out, "{i}");
        for j in 0..frame.k() {
            for v in frame.vector(i, j).iter() {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    out
}

const SVG_SIZE: f64 = 600.0;
const SVG_MARGIN: f64 = 20.0;

/// Orthographic SVG 1.1 view of a curve onto two ambient axes. Field 0 is
/// drawn as short ticks at every `tick_every`-th sample when given.
pub fn svg(m: &EmbeddedManifold, axes: [usize; 2], frame: Option<&NormalFrame>, tick_every: usize) -> String {
    let pts: Vec<(f64, f64)> = m.positions().iter().map(|p| (p[axes[0]], p[axes[1]])).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span;
    let tick = 0.03 * span;
    // SVG y grows downwards
    let map = |x: f64, y: f64| (SVG_MARGIN + (x - x0) * scale, SVG_MARGIN + (y1 - y) * scale);

    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str("<!DOCTYPE svg PUBLIC \"-//W3C//DTD SVG 1.1//EN\" \"http://www.w3.org/Graphics/SVG/1.1/DTD/svg11.dtd\">\n");
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">",
        s = SVG_SIZE
    );
    let element = match m.topology() {
        Topology::Polyline { closed: true } => "polygon",
        _ => "polyline",
    };
    let mut points = String::new();
    for &(x, y) in &pts {
        let (u, v) = map(x, y);
        let _ = write!(points, "{u:.3},{v:.3} ");
    }
    let _ = writeln!(
        out,
        "  <{element} points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>",
        points.trim_end()
    );
    if let Some(frame) = frame.filter(|f| f.k() > 0 && f.len() == m.len()) {
        out.push_str("  <g stroke=\"#c0392b\" stroke-width=\"1\">\n");
        for i in (0..m.len()).step_by(tick_every.max(1)) {
            let f = frame.vector(i, 0);
            let (a, b) = map(pts[i].0, pts[i].1);
            let (c, d) = map(pts[i].0 + tick * f[axes[0]], pts[i].1 + tick * f[axes[1]]);
            let _ = writeln!(out, "    <line x1=\"{a:.3}\" y1=\"{b:.3}\" x2=\"{c:.3}\" y2=\"{d:.3}\"/>");
        }
        out.push_str("  </g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Wavefront OBJ of a sampled surface, positions taken from three ambient
/// axes.
pub fn obj(m: &EmbeddedManifold, axes: [usize; 3]) -> String {
    let mut out = String::new();
    for p in m.positions() {
        let _ = writeln!(out, "v {} {} {}", p[axes[0]], p[axes[1]], p[axes[2]]);
    }
    for [a, b, c] in m.triangles() {
        let _ = writeln!(out, "f {} {} {}", a + 1, b + 1, c + 1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::AmbientSplit;
    use crate::Vector;

    fn square() -> EmbeddedManifold {
        let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
            .iter()
            .map(|p| Vector::from_row_slice(p))
            .collect();
        EmbeddedManifold::polyline(pts, true, AmbientSplit::new(1, 1, 0).unwrap()).unwrap()
    }

    #[test]
    fn csv_has_one_row_per_sample() {
        let text = samples_csv(&square());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "sample,p0,x0,x1");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[2], "1,1,1,0");
    }

    #[test]
    fn svg_is_well_formed() {
        let text = svg(&square(), [0, 1], None, 1);
        assert!(text.starts_with("<?xml"));
        assert!(text.contains("<polygon points=\"20.000,580.000 580.000,580.000"));
        assert_eq!(text.matches("<svg").count(), 1);
        assert!(text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn obj_triangulates_grid() {
        let pts = (0..6).map(|i| Vector::from_vec(vec![(i % 3) as f64, (i / 3) as f64, 0.0, 0.0])).collect();
        let m = EmbeddedManifold::grid(2, 3, pts, AmbientSplit::new(3, 1, 0).unwrap()).unwrap();
        let text = obj(&m, [0, 1, 3]);
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 6);
        assert_eq!(text.lines().filter(|l| l.starts_with("f ")).count(), 4);
    }
}
