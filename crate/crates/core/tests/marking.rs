use std::f64::consts::PI;

use compression::fields::{
    angle_between, downset, horizontal_set, localise, mark_neighbourhoods, mark_v, perpendicularize,
    upmost_field, v_component_lengths, SubsetMarking,
};
use compression::geometry::estimate_tangent_frame;
use compression::scene::{arc_coordinate, ManifoldSpec, Scene};
use compression::{EmbeddedManifold, NormalFrame, TangentFrame};

fn scene(name: &str) -> (EmbeddedManifold, TangentFrame, NormalFrame) {
    let built = Scene::builtin(name).unwrap().build().unwrap();
    prepared(built.manifold, built.frame)
}

fn prepared(m: EmbeddedManifold, frame: NormalFrame) -> (EmbeddedManifold, TangentFrame, NormalFrame) {
    let t = estimate_tangent_frame(&m).unwrap();
    let alpha = perpendicularize(&m, &frame, &t).unwrap();
    (m, t, alpha)
}

/// Half the largest adjacent-sample angle of field 0, the default downset
/// tolerance.
fn default_tol(m: &EmbeddedManifold, alpha: &NormalFrame) -> f64 {
    0.5 * m
        .edges()
        .into_iter()
        .map(|(a, b)| angle_between(alpha.vector(a, 0), alpha.vector(b, 0)))
        .fold(0.0, f64::max)
        + 1e-12
}

fn marked(m: &EmbeddedManifold, t: &TangentFrame, alpha: &NormalFrame) -> SubsetMarking {
    let h = horizontal_set(m, t, 1e-2);
    let h = mark_neighbourhoods(m, &h, 2, 4);
    downset(m, t, alpha, &h, default_tol(m, alpha)).unwrap()
}

fn indices(flags: &[bool]) -> Vec<usize> {
    (0..flags.len()).filter(|&i| flags[i]).collect()
}

#[test]
fn twist_downset_is_the_single_middle_sample() {
    let (m, t, alpha) = scene("twist");
    let marking = marked(&m, &t, &alpha);
    assert_eq!(SubsetMarking::count(&marking.h), 0);
    assert_eq!(indices(&marking.d), vec![199]);
    marking.check().unwrap_err(); // V not marked yet
}

#[test]
fn whitney_horizontal_set_is_the_origin() {
    let (m, t, _) = scene("whitney");
    let h = horizontal_set(&m, &t, 1e-2);
    let found = indices(&h.h);
    assert_eq!(found.len(), 1);
    // the origin is the centre of the 41 x 41 grid
    let (r, c) = (found[0] / 41, found[0] % 41);
    assert!(r.abs_diff(20) <= 1 && c.abs_diff(20) <= 1, "{r} {c}");
}

#[test]
fn two_in_four_downset_is_a_grid_line() {
    let (m, t, alpha) = scene("two_in_four");
    let marking = marked(&m, &t, &alpha);
    let d = indices(&marking.d);
    let (rows, cols) = (21, 41);
    assert!(d.len() >= rows, "{}", d.len());
    // one connected path through every row
    for r in 0..rows {
        assert!(d.iter().any(|&i| i / cols == r), "row {r} missed");
    }
    let adj = m.neighbours();
    let mut seen = vec![false; m.len()];
    let mut stack = vec![d[0]];
    seen[d[0]] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if marking.d[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    assert!(d.iter().all(|&i| seen[i]), "downset is not connected");
}

#[test]
fn downset_is_stable_under_refinement() {
    let locate = |samples: usize| {
        let mut sc = Scene::builtin("twist").unwrap();
        if let ManifoldSpec::Line { samples: s, .. } = &mut sc.manifold {
            *s = samples;
        }
        let built = sc.build().unwrap();
        let (m, t, alpha) = prepared(built.manifold, built.frame);
        let marking = marked(&m, &t, &alpha);
        let arc = arc_coordinate(&m);
        let d = indices(&marking.d);
        assert!(!d.is_empty());
        d.iter().map(|&i| arc[i]).sum::<f64>() / d.len() as f64
    };
    let coarse_cell = 4.0 / 399.0;
    assert!((locate(400) - locate(800)).abs() < coarse_cell);
}

#[test]
fn localised_twist_is_upmost_outside_v_and_smooth() {
    let (m, t, alpha) = scene("twist");
    let mut marking = marked(&m, &t, &alpha);
    for i in 184..=214 {
        marking.v[i] = true;
    }
    let edge = m.max_edge_length();
    let collar = 12.0 * edge;
    let out = localise(&m, &t, &alpha, &marking, collar).unwrap();
    let psi = upmost_field(&m, &t);
    let dist = m.distance_to_set(&(0..m.len()).map(|i| !marking.in_w(i)).collect::<Vec<_>>());
    for i in 0..m.len() {
        let v = out.vector(i, 0);
        if !marking.in_w(i) {
            assert!(angle_between(v, psi[i].as_ref().unwrap()) < 1e-12, "sample {i}");
        } else if dist[i] >= collar {
            assert!(angle_between(v, alpha.vector(i, 0)) < 1e-12, "sample {i}");
        }
    }
    let worst = m
        .edges()
        .into_iter()
        .map(|(a, b)| angle_between(out.vector(a, 0), out.vector(b, 0)))
        .fold(0.0, f64::max);
    assert!(worst < PI / 8.0, "{worst}");
}

#[test]
fn twist_is_in_general_position_without_perturbation() {
    let (m, t, alpha) = scene("twist");
    let marking = marked(&m, &t, &alpha);
    let delta = 5.0 * m.max_edge_length();
    let with_v = mark_v(&m, &t, &marking, delta);
    with_v.check().unwrap();
    let lengths = v_component_lengths(&m, &t, &with_v);
    assert_eq!(lengths.len(), 1);
    assert!(lengths[0].1 < delta, "{lengths:?}");
}

#[test]
fn marking_csv_labels_every_sample() {
    let (m, t, alpha) = scene("twist");
    let marking = mark_v(&m, &t, &marked(&m, &t, &alpha), 0.05);
    let csv = marking.to_csv();
    assert_eq!(csv.lines().count(), m.len() + 1);
    assert!(csv.contains("\n199,D\n"));
    assert!(csv.contains("\n200,V\n"));
}
