use proptest::prelude::*;

use compression::flow::{read_traces, rk4_step, write_trace};
use compression::scene::Scene;
use compression::verify::count_double_points;
use compression::{compress_local, Vector};

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Every pair of segments without a shared vertex, tested by orientation
/// signs.
fn brute_force(pts: &[[f64; 2]], closed: bool) -> usize {
    let n = pts.len();
    let mut segs: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    if closed && n > 2 {
        segs.push((n - 1, 0));
    }
    let mut count = 0;
    for i in 0..segs.len() {
        for j in i + 1..segs.len() {
            let (a, b) = segs[i];
            let (c, d) = segs[j];
            if a == c || a == d || b == c || b == d {
                continue;
            }
            let (p, q, r, s) = (pts[a], pts[b], pts[c], pts[d]);
            if orient(p, q, r) * orient(p, q, s) < 0.0 && orient(r, s, p) * orient(r, s, q) < 0.0 {
                count += 1;
            }
        }
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn double_points_match_brute_force(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 3..40),
        closed in any::<bool>(),
    ) {
        let pts: Vec<[f64; 2]> = pts.into_iter().map(|(x, y)| [x, y]).collect();
        let dp = count_double_points(&pts, closed, 1e-3);
        prop_assert_eq!(dp.count, brute_force(&pts, closed));
    }
}

#[test]
fn rk4_error_drops_sixteenfold() {
    // x' = A x with A a rotation generator; exact solution known
    let f = |y: &Vector, _t: f64| -> Result<Vector, ()> { Ok(Vector::from_vec(vec![-y[1], y[0]])) };
    let error = |h: f64| {
        let steps = (1.0 / h).round() as usize;
        let mut x = Vector::from_vec(vec![1.0, 0.0]);
        for k in 0..steps {
            x = rk4_step(&x, k as f64 * h, h, f).unwrap();
        }
        (x - Vector::from_vec(vec![1f64.cos(), 1f64.sin()])).norm()
    };
    let ratio = error(0.1) / error(0.05);
    assert!(ratio >= 12.0, "{ratio}");
}

#[test]
fn runs_are_deterministic_and_traces_round_trip() {
    let b = Scene::builtin("twist").unwrap().build().unwrap();
    let serialise = || {
        let r = compress_local(&b.manifold, &b.frame, &b.config).unwrap();
        let mut out = Vec::new();
        for s in &r.stages {
            write_trace(s, &mut out).unwrap();
        }
        out
    };
    let first = serialise();
    assert_eq!(first, serialise());
    let (stages, other) = read_traces(first.as_slice()).unwrap();
    assert!(other.is_empty());
    let mut again = Vec::new();
    for s in &stages {
        write_trace(s, &mut again).unwrap();
    }
    assert_eq!(first, again);
}
