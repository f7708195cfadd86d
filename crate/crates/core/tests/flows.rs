use compression::compress::{prepare_global, CompressionConfig};
use compression::flow::{integrate, FlowConfig, FlowMode, IsotopyTrace, Snapshot, StepStats};
use compression::scene::Scene;
use compression::verify::{check_normality, check_rise_rate, check_speed, immersion_ratio};
use compression::{compress_global, AmbientSplit, EmbeddedManifold, Topology, Vector};

fn twist() -> (EmbeddedManifold, compression::NormalFrame) {
    let built = Scene::builtin("twist").unwrap().build().unwrap();
    (built.manifold, built.frame)
}

fn default_config() -> CompressionConfig {
    CompressionConfig::default()
}

#[test]
fn modified_flow_is_the_global_flow_shifted_down() {
    let (m, frame) = twist();
    let setup = prepare_global(&m, &frame, &default_config()).unwrap();
    let mut global = setup.flow.clone();
    global.mode = FlowMode::Global;
    let g = integrate(&m, &setup.grounded.alpha, &setup.field, &global).unwrap();
    let modified = integrate(&m, &setup.grounded.alpha, &setup.field, &setup.flow).unwrap();
    assert_eq!(g.stats.steps, modified.stats.steps);
    let t = g.final_time();
    let up = m.split().up();
    for (a, b) in g.last().positions.iter().zip(&modified.last().positions) {
        assert!((a - &up * t - b).norm() < 1e-6);
    }
}

#[test]
fn modified_twist_run_ends_vertical() {
    let (m, frame) = twist();
    let cfg = CompressionConfig {
        mu: Some(0.2),
        ..default_config()
    };
    let r = compress_global(&m, &frame, &cfg).unwrap();
    assert!(r.stages[0].converged);
    assert!((r.summary.epsilon_angle - 0.6).abs() < 1e-6);
    let up = m.split().up();
    for c in &r.stages[0].last().carried {
        assert!(compression::fields::angle_between(c, &up) <= 1e-3);
    }
}

#[test]
fn global_flow_climbs_at_the_guaranteed_rate() {
    let (m, frame) = twist();
    let setup = prepare_global(&m, &frame, &default_config()).unwrap();
    let mut cfg = setup.flow.clone();
    cfg.mode = FlowMode::Global;
    let trace = integrate(&m, &setup.grounded.alpha, &setup.field, &cfg).unwrap();
    let eps = setup.grounded.grounding.epsilon;
    let mu = setup.grounded.mu;
    assert!((mu - eps / 4.0).abs() < 1e-12);
    let entry = check_rise_rate(&trace, eps, mu).unwrap();
    assert!(entry.pass, "{entry:?}");
    assert!(entry.measured >= (0.75 * eps).sin() - 1e-3);
}

#[test]
fn twist_normality_margins() {
    let (m, frame) = twist();
    let r = compress_global(&m, &frame, &default_config()).unwrap();
    let entries = check_normality(&r.stages[0], r.summary.mu, r.summary.smoothing).unwrap();
    assert!(entries.iter().all(|e| e.pass), "{entries:?}");
    assert!(entries[0].measured >= r.summary.mu - r.summary.smoothing - 1e-6);
}

fn single_step_trace(gamma: &Vector, h: f64) -> IsotopyTrace {
    let up = Vector::from_vec(vec![0.0, 0.0, 1.0]);
    let x = Vector::zeros(3);
    let y = &x + (gamma - &up) * h;
    IsotopyTrace {
        name: "fixture".into(),
        config: FlowConfig::new(FlowMode::Modified, h, h),
        topology: Topology::Polyline { closed: false },
        params: vec![vec![0.0]],
        split: AmbientSplit::new(2, 1, 0).unwrap(),
        snapshots: vec![
            Snapshot {
                t: 0.0,
                positions: vec![x],
                carried: vec![gamma.clone()],
                extra: vec![],
            },
            Snapshot {
                t: h,
                positions: vec![y],
                carried: vec![gamma.clone()],
                extra: vec![],
            },
        ],
        stats: StepStats::default(),
        converged: true,
    }
}

#[test]
fn speed_bound_is_tight() {
    for c in [0.9, 0.5, 0.0, -0.01] {
        let s = (1.0f64 - c * c).sqrt();
        let gamma = Vector::from_vec(vec![s, 0.0, c]);
        let entry = check_speed(&single_step_trace(&gamma, 0.01));
        assert!((entry.measured - (2.0 - 2.0 * c).sqrt()).abs() < 1e-6);
        assert_eq!(entry.pass, c >= 0.0, "{entry:?}");
    }
}

#[test]
fn immersion_ratio_fixtures() {
    let split = AmbientSplit::new(2, 1, 0).unwrap();
    let line = |dir: [f64; 3]| {
        let pts = (0..10).map(|i| Vector::from_row_slice(&dir) * i as f64).collect();
        EmbeddedManifold::polyline(pts, false, split).unwrap()
    };
    let slope = 0.6f64;
    let tilted = immersion_ratio(&line([slope.cos(), 0.0, slope.sin()])).unwrap();
    assert!((tilted - slope.cos()).abs() < 1e-12);
    assert!(immersion_ratio(&line([0.0, 0.0, 1.0])).unwrap() < 1e-12);
}
