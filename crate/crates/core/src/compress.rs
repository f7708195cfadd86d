//! Drivers for the three compression procedures: global, local (with a
//! displacement budget), and multi-field.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{
    self, angle_between, carry_frame, downset, globalize, ground_by_perturbation, horizontal_set, localise,
    mark_neighbourhoods, measure_grounding, perpendicularize, perturb_general_position,
    upwards_rotate, AmbientField, FieldError, GeneralPositionOptions, GroundingReport, NormalFrame,
    SubsetMarking,
};
use crate::flow::{integrate, FlowConfig, FlowError, FlowMode, IsotopyTrace, Snapshot};
use crate::geometry::{
    discrete_reach, estimate_tangent_frame, AmbientSplit, EmbeddedManifold, EmbeddingStatus,
    GeometryError, ReachOptions, TangentFrame, TubularNeighbourhood,
};
use crate::verify::{self, InvariantReport, VerifyError, VerifyParams};
use crate::Vector;

/// Numerical parameters. `None` entries are derived from the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Upwards rotation stops `mu` short of vertical; default a quarter of
    /// the grounding angle.
    pub mu: Option<f64>,
    /// Half-width of the smoothed cap; default `mu / 2`.
    pub smoothing: Option<f64>,
    /// Tubular radius.
    pub nu: Option<f64>,
    /// Displacement budget of the local procedure.
    pub epsilon_budget: Option<f64>,
    /// Flowline length bound inside `V`.
    pub delta: Option<f64>,
    /// Widths of `U'` and `U` around the horizontal set, in grid steps.
    pub u_inner_cells: usize,
    pub u_cells: usize,
    /// Width of the localisation collar; default `delta / 4`.
    pub collar: Option<f64>,
    /// Angular tolerance of the horizontal set test.
    pub horizontal_tol: f64,
    /// Angular tolerance of the downset test; default half the largest
    /// angle between the field at adjacent samples.
    pub downset_tol: Option<f64>,
    pub h: Option<f64>,
    pub t_max: Option<f64>,
    pub omega: Option<f64>,
    pub verticality_tol: f64,
    /// Bound on the final angle between each field and its axis.
    pub alignment_tol: f64,
    pub record_every: usize,
    pub seed: u64,
    /// Samples of the relative region `C`, held fixed.
    pub relative: Option<Vec<bool>>,
    /// Intrinsic radius separating sheets of an immersion.
    pub locality: Option<f64>,
    pub max_refinements: usize,
    pub perturb_angle: f64,
    pub max_perturb_rounds: usize,
    pub independence_tol: f64,
    pub immersion_tol: f64,
    pub transverse_tol: f64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            mu: None,
            smoothing: None,
            nu: None,
            epsilon_budget: None,
            delta: None,
            u_inner_cells: 2,
            u_cells: 4,
            collar: None,
            horizontal_tol: 1e-2,
            downset_tol: None,
            h: None,
            t_max: None,
            omega: None,
            verticality_tol: 1e-3,
            alignment_tol: 1e-2,
            record_every: 10,
            seed: 0,
            relative: None,
            locality: None,
            max_refinements: 4,
            perturb_angle: 0.2,
            max_perturb_rounds: 8,
            independence_tol: 1e-6,
            immersion_tol: 0.1,
            transverse_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionStatus {
    Compressed,
    NotConverged,
    PreconditionFailed,
}

/// Parameters actually used and headline measurements of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub procedure: String,
    pub epsilon_angle: f64,
    pub mu: f64,
    pub smoothing: f64,
    pub nu: f64,
    pub delta: Option<f64>,
    pub omega: Option<f64>,
    pub h: f64,
    pub t_max: f64,
    pub refinements: usize,
    pub perturbation_rounds: usize,
    pub max_displacement: f64,
    pub steps: usize,
    pub double_points: Option<usize>,
    pub non_transverse: Option<usize>,
    pub triple_points: Option<usize>,
    pub horizontal: usize,
    pub downset: usize,
    pub neighbourhood_u: usize,
    pub neighbourhood_v: usize,
}

#[derive(Debug, Clone)]
pub struct CompressionResult {
    pub status: CompressionStatus,
    /// Flow stages in order; later stages start where earlier ones end.
    pub stages: Vec<IsotopyTrace>,
    pub report: InvariantReport,
    pub verify: VerifyParams,
    pub final_manifold: EmbeddedManifold,
    pub final_frame: NormalFrame,
    pub marking: Option<SubsetMarking>,
    pub summary: RunSummary,
}

impl CompressionResult {
    pub fn max_displacement(&self) -> f64 {
        self.summary.max_displacement
    }

    /// `|final - initial|` per sample over all stages.
    pub fn displacements(&self) -> Vec<f64> {
        let first = &self.stages[0].first().positions;
        let last = &self.stages[self.stages.len() - 1].last().positions;
        first.iter().zip(last).map(|(a, b)| (b - a).norm()).collect()
    }
}

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("precondition failed ({precondition}): {detail}")]
    PreconditionFailed { precondition: String, detail: String },
    #[error("field is not grounded enough: angle {epsilon} with the downward vertical, mu = {mu}")]
    NotGrounded { epsilon: f64, mu: f64 },
    #[error("displacement {displacement} exceeds the budget {budget} (limited by {limiting})")]
    BudgetExceeded {
        displacement: f64,
        budget: f64,
        limiting: String,
        result: Box<CompressionResult>,
    },
    #[error("induced neighbourhood clash in pass {pass}: {source}")]
    InducedNeighbourhoodClash { pass: usize, source: FieldError },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Flow(FlowError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

impl From<FlowError> for CompressError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Field(f) => CompressError::Field(f),
            FlowError::Geometry(g) => CompressError::Geometry(g),
            other => CompressError::Flow(other),
        }
    }
}

impl CompressError {
    /// Name of the violated precondition, if this is a refusal.
    pub fn precondition(&self) -> Option<&str> {
        match self {
            CompressError::PreconditionFailed { precondition, .. } => Some(precondition),
            CompressError::NotGrounded { .. } => Some("grounded field"),
            _ => None,
        }
    }
}

fn run_flow(
    m: &EmbeddedManifold,
    frame: &NormalFrame,
    field: &AmbientField,
    cfg: &FlowConfig,
    name: &str,
) -> Result<IsotopyTrace, CompressError> {
    let mut trace = match integrate(m, frame, field, cfg) {
        Ok(t) => t,
        Err(FlowError::NotConverged(t)) => *t,
        Err(e) => return Err(e.into()),
    };
    trace.name = name.to_string();
    Ok(trace)
}

/// Field 0 perpendicular and grounded, with everything derived on the way.
#[derive(Debug, Clone)]
pub struct Grounded {
    pub tangents: TangentFrame,
    /// Field 0 (and any further fields) made perpendicular.
    pub alpha: NormalFrame,
    pub grounding: GroundingReport,
    pub mu: f64,
    pub smoothing: f64,
    pub immersed: Option<(usize, usize, f64)>,
    pub locality: f64,
}

/// Checks the preconditions shared by all procedures and returns the
/// perpendicular, grounded field.
pub fn ground(
    m: &EmbeddedManifold,
    alpha: &NormalFrame,
    cfg: &CompressionConfig,
) -> Result<Grounded, CompressError> {
    if alpha.len() != m.len() {
        return Err(FieldError::SampleCountMismatch {
            expected: m.len(),
            found: alpha.len(),
        }
        .into());
    }
    let codim = m.horizontal_codimension();
    if codim < 0 {
        return Err(CompressError::PreconditionFailed {
            precondition: "q >= m".into(),
            detail: format!(
                "a {}-manifold cannot project to an immersion in Q of dimension {}",
                m.manifold_dim(),
                m.split().q + m.split().n - 1
            ),
        });
    }
    let tangents = estimate_tangent_frame(m)?;
    alpha.check_independence(&tangents, cfg.independence_tol)?;
    let raw_perpendicular = alpha.max_tangential_component(&tangents) < 1e-6;
    let mut perp = perpendicularize(m, alpha, &tangents)?;
    let mut grounding = measure_grounding(&perp, m.split());
    let relative = m.boundary().iter().any(|&b| b);
    if codim < 1 && !relative && !(raw_perpendicular && grounding.is_grounded()) {
        return Err(CompressError::PreconditionFailed {
            precondition: "q - m >= 1".into(),
            detail: "horizontal codimension 0 needs a perpendicular grounded field".into(),
        });
    }
    let locality = cfg.locality.unwrap_or_else(|| m.default_locality());
    let immersed = match m.embedding_status(locality, m.default_embedding_tolerance()) {
        EmbeddingStatus::Embedded => None,
        EmbeddingStatus::Immersed { a, b, distance } => Some((a, b, distance)),
    };
    if let (Some((a, b, distance)), true) = (immersed, codim < 1) {
        return Err(CompressError::PreconditionFailed {
            precondition: "embedded input".into(),
            detail: format!(
                "M meets itself near samples {a} and {b} (distance {distance:.1e}): an immersion with q - m = 0 \
                 cannot be compressed, since its projection would immerse M in a space of \
                 its own dimension"
            ),
        });
    }
    let wanted = cfg.mu.unwrap_or(0.0);
    if grounding.epsilon <= wanted || grounding.epsilon < 1e-3 {
        if codim < 1 {
            return Err(CompressError::NotGrounded {
                epsilon: grounding.epsilon,
                mu: wanted,
            });
        }
        let target = (wanted * 2.0).max(0.2);
        let radius = 5.0 * m.max_edge_length();
        let lifted = ground_by_perturbation(m, &tangents, &perp.select(0), target, radius, cfg.seed)?;
        perp = carry_frame(&perp, &lifted)?;
        grounding = measure_grounding(&perp, m.split());
    }
    let mu = cfg.mu.unwrap_or(grounding.epsilon / 4.0);
    if !(mu > 0.0 && mu < grounding.epsilon) {
        return Err(CompressError::NotGrounded {
            epsilon: grounding.epsilon,
            mu,
        });
    }
    let smoothing = cfg.smoothing.unwrap_or(mu / 2.0);
    Ok(Grounded {
        tangents,
        alpha: perp,
        grounding,
        mu,
        smoothing,
        immersed,
        locality,
    })
}

fn reach_of(m: &EmbeddedManifold, tangents: &TangentFrame, locality: f64) -> Option<f64> {
    let opts = ReachOptions {
        locality,
        tolerance: m.default_embedding_tolerance(),
    };
    discrete_reach(m, tangents, opts).ok()
}

fn default_t_max(m: &EmbeddedManifold, nu: f64, epsilon: f64, mu: f64) -> f64 {
    10.0 * (m.height_span() + 2.0 * nu) / (epsilon - mu).sin()
}

/// Everything needed to run the global flow of `m`.
#[derive(Debug, Clone)]
pub struct GlobalSetup {
    pub grounded: Grounded,
    pub beta: NormalFrame,
    pub tube: TubularNeighbourhood,
    pub field: AmbientField,
    pub flow: FlowConfig,
}

/// Perpendicularise, ground, rotate upwards and globalise.
pub fn prepare_global(
    m: &EmbeddedManifold,
    alpha: &NormalFrame,
    cfg: &CompressionConfig,
) -> Result<GlobalSetup, CompressError> {
    let grounded = ground(m, alpha, cfg)?;
    let beta = upwards_rotate(&grounded.alpha.select(0), m.split(), grounded.mu, grounded.smoothing)?;
    let edge = m.max_edge_length();
    let reach = reach_of(m, &grounded.tangents, grounded.locality);
    let nu = match (cfg.nu, reach) {
        (Some(nu), _) => nu,
        (None, Some(r)) => (0.9 * r).min(10.0 * edge),
        (None, None) => 2.0 * edge,
    };
    let opts = ReachOptions {
        locality: grounded.locality,
        tolerance: m.default_embedding_tolerance(),
    };
    let tube = TubularNeighbourhood::new(m, &grounded.tangents, nu, opts)?;
    let field = globalize(m, &beta, &tube)?;
    let h = cfg.h.unwrap_or(0.2 * nu.min(m.min_edge_length()));
    let t_max = cfg
        .t_max
        .unwrap_or_else(|| default_t_max(m, nu, grounded.grounding.epsilon, grounded.mu));
    let mut flow = FlowConfig::new(FlowMode::Modified, h, t_max.max(h));
    flow.verticality_tol = cfg.verticality_tol;
    flow.record_every = cfg.record_every;
    Ok(GlobalSetup {
        grounded,
        beta,
        tube,
        field,
        flow,
    })
}

fn summarise_final(summary: &mut RunSummary, m: &EmbeddedManifold, cfg: &CompressionConfig) {
    if let Some(dp) = verify::projected_double_points(m, cfg.transverse_tol) {
        summary.double_points = Some(dp.count);
        summary.non_transverse = Some(dp.non_transverse.len());
        summary.triple_points = Some(dp.triple_points);
    }
}

fn finish(
    stages: Vec<IsotopyTrace>,
    params: VerifyParams,
    marking: Option<SubsetMarking>,
    mut summary: RunSummary,
    cfg: &CompressionConfig,
) -> Result<CompressionResult, CompressError> {
    let report = verify::verify_run(&stages, &params)?;
    let last = &stages[stages.len() - 1];
    let final_manifold = last.final_manifold()?;
    let final_frame = last.final_frame()?;
    summary.max_displacement =
        verify::max_displacement(&stages[0].first().positions, &last.last().positions);
    summary.steps = stages.iter().map(|s| s.stats.steps).sum();
    summarise_final(&mut summary, &final_manifold, cfg);
    let status = if last.converged {
        CompressionStatus::Compressed
    } else {
        CompressionStatus::NotConverged
    };
    Ok(CompressionResult {
        status,
        stages,
        report,
        verify: params,
        final_manifold,
        final_frame,
        marking,
        summary,
    })
}

/// Isotopes `m` until field 0 of `alpha` points vertically up, by the
/// modified global flow of the rotated field.
pub fn compress_global(
    m: &EmbeddedManifold,
    alpha: &NormalFrame,
    cfg: &CompressionConfig,
) -> Result<CompressionResult, CompressError> {
    let grounded = ground(m, alpha, cfg)?;
    if grounded.immersed.is_some() {
        // only local semantics make sense for an immersion
        return compress_local(m, alpha, cfg);
    }
    let setup = prepare_global(m, alpha, cfg)?;
    let trace = run_flow(m, &setup.grounded.alpha, &setup.field, &setup.flow, "global")?;
    let g = &setup.grounded;
    let params = VerifyParams {
        epsilon_angle: g.grounding.epsilon,
        mu: g.mu,
        smoothing: g.smoothing,
        epsilon_budget: cfg.epsilon_budget,
        immersion_tol: cfg.immersion_tol,
        alignment_tol: cfg.alignment_tol,
        focus: None,
        fixed: cfg.relative.clone(),
    };
    let summary = RunSummary {
        procedure: "global".into(),
        epsilon_angle: g.grounding.epsilon,
        mu: g.mu,
        smoothing: g.smoothing,
        nu: setup.tube.radius,
        h: setup.flow.h,
        t_max: setup.flow.t_max,
        ..RunSummary::default()
    };
    finish(vec![trace], params, None, summary, cfg)
}

/// Largest angle between field 0 at adjacent samples.
fn max_adjacent_step(m: &EmbeddedManifold, alpha: &NormalFrame) -> f64 {
    m.edges()
        .into_iter()
        .map(|(a, b)| angle_between(alpha.vector(a, 0), alpha.vector(b, 0)))
        .fold(0.0, f64::max)
}

/// A third of the smallest distance between `D - U'` and other sheets of `M`
/// over the same point of `Q`; `None` when there are no other sheets.
pub fn separation_omega(m: &EmbeddedManifold, marking: &SubsetMarking, locality: f64) -> Option<f64> {
    let seeds = marking.d_outside_inner();
    let split = m.split();
    let q_dist = |a: &Vector, b: &Vector| {
        let mut s = 0.0;
        for k in 0..split.dim() {
            if k != split.vertical_index() {
                s += (a[k] - b[k]).powi(2);
            }
        }
        s.sqrt()
    };
    let tol = m.max_edge_length();
    let mut best = f64::INFINITY;
    for p in (0..m.len()).filter(|&i| seeds[i]) {
        let near: Vec<usize> = m.intrinsic_ball(p, locality).into_iter().map(|(i, _)| i).collect();
        for q in 0..m.len() {
            if near.contains(&q) {
                continue;
            }
            if q_dist(m.position(p), m.position(q)) <= tol {
                best = best.min((m.position(p) - m.position(q)).norm());
            }
        }
    }
    best.is_finite().then_some(best / 3.0)
}

/// Parameters of one local attempt.
#[derive(Debug, Clone, Copy)]
struct LocalScale {
    nu: Option<f64>,
    delta: f64,
}

/// Isotopes `m` to a compressible embedding moving every point less than
/// `cfg.epsilon_budget`, by straightening only near the downset and the
/// horizontal set. Halves `nu` and `delta` up to `cfg.max_refinements` times
/// while the budget is exceeded.
pub fn compress_local(
    m: &EmbeddedManifold,
    alpha: &NormalFrame,
    cfg: &CompressionConfig,
) -> Result<CompressionResult, CompressError> {
    if let Some(b) = cfg.epsilon_budget {
        if !(b > 0.0) {
            return Err(CompressError::InvalidConfig(format!(
                "displacement budget must be positive, got {b}"
            )));
        }
    }
    let budget = cfg.epsilon_budget.unwrap_or(f64::INFINITY);
    let mut scale = LocalScale {
        nu: cfg.nu,
        delta: cfg.delta.unwrap_or(20.0 * m.max_edge_length()),
    };
    let mut refinements = 0;
    loop {
        let mut result = local_attempt(m, alpha, cfg, scale)?;
        result.summary.refinements = refinements;
        let d = result.max_displacement();
        if d < budget || result.status != CompressionStatus::Compressed {
            return Ok(result);
        }
        if refinements == cfg.max_refinements {
            return Err(CompressError::BudgetExceeded {
                displacement: d,
                budget,
                limiting: format!(
                    "tubular radius {} and delta {} after {refinements} refinements; \
                     finer sampling may be needed",
                    result.summary.nu, scale.delta
                ),
                result: Box::new(result),
            });
        }
        refinements += 1;
        scale = LocalScale {
            nu: Some(result.summary.nu / 2.0),
            delta: scale.delta / 2.0,
        };
    }
}

fn local_attempt(
    m: &EmbeddedManifold,
    alpha: &NormalFrame,
    cfg: &CompressionConfig,
    scale: LocalScale,
) -> Result<CompressionResult, CompressError> {
    let g = ground(m, alpha, cfg)?;
    let t = &g.tangents;
    let field0 = g.alpha.select(0);
    let marking = horizontal_set(m, t, cfg.horizontal_tol);
    let marking = mark_neighbourhoods(m, &marking, cfg.u_inner_cells, cfg.u_cells);
    let downset_tol = cfg
        .downset_tol
        .unwrap_or_else(|| 0.5 * max_adjacent_step(m, &field0) + 1e-12);
    let marking = downset(m, t, &field0, &marking, downset_tol)?;
    let gp = perturb_general_position(
        m,
        t,
        &field0,
        &marking,
        &GeneralPositionOptions {
            delta: scale.delta,
            perturb_angle: cfg.perturb_angle,
            max_rounds: cfg.max_perturb_rounds,
            seed: cfg.seed,
            downset_tol,
        },
    )?;
    let marking = gp.marking;
    let collar = cfg.collar.unwrap_or(0.25 * scale.delta);
    let localised = localise(m, t, &gp.frame, &marking, collar)?;
    let beta = upwards_rotate(&localised, m.split(), g.mu, g.smoothing)?;

    let edge = m.max_edge_length();
    let reach = if g.immersed.is_some() { None } else { reach_of(m, t, g.locality) };
    let mut nu = scale.nu.unwrap_or((10.0 * edge).min(scale.delta / 4.0));
    if let Some(r) = reach {
        nu = nu.min(0.9 * r);
    }
    let opts = ReachOptions {
        locality: g.locality,
        tolerance: m.default_embedding_tolerance(),
    };
    let tube = TubularNeighbourhood::new(m, t, nu, opts)?;
    let field = globalize(m, &beta, &tube)?;
    let omega = cfg
        .omega
        .or_else(|| separation_omega(m, &marking, g.locality))
        .unwrap_or_else(|| m.height_span().max(m.bounding_diagonal() * 1e-3));
    let h = cfg.h.unwrap_or(0.2 * nu.min(m.min_edge_length()));
    let t_max = cfg
        .t_max
        .unwrap_or_else(|| default_t_max(m, nu, g.grounding.epsilon, g.mu))
        .min(2.0 * omega + h)
        .max(h);
    let mut flow = FlowConfig::new(FlowMode::Phased, h, t_max);
    flow.omega = Some(omega);
    flow.verticality_tol = cfg.verticality_tol;
    flow.record_every = cfg.record_every;
    flow.fixed = cfg.relative.clone().unwrap_or_default();

    // the frame handed to the flow: field 0 through perturbation,
    // localisation and upwards rotation, further fields turned along
    let carried = carry_frame(&g.alpha, &gp.frame)?;
    let carried = carry_frame(&carried, &localised)?;
    let carried = carry_frame(&carried, &beta)?;
    let main = run_flow(m, &carried, &field, &flow, "local")?;
    let mut stages = vec![main];
    if !stages[0].converged {
        let residual = residual_stage(&stages[0], cfg, g.mu, nu)?;
        stages.push(residual);
    }

    let focus: Vec<bool> = (0..m.len()).map(|i| marking.in_w(i)).collect();
    let params = VerifyParams {
        epsilon_angle: g.grounding.epsilon,
        mu: g.mu,
        smoothing: g.smoothing,
        epsilon_budget: cfg.epsilon_budget,
        immersion_tol: cfg.immersion_tol,
        alignment_tol: cfg.alignment_tol,
        focus: Some(focus),
        fixed: cfg.relative.clone(),
    };
    let summary = RunSummary {
        procedure: "local".into(),
        epsilon_angle: g.grounding.epsilon,
        mu: g.mu,
        smoothing: g.smoothing,
        nu,
        delta: Some(scale.delta),
        omega: Some(omega),
        h,
        t_max,
        perturbation_rounds: gp.rounds,
        horizontal: SubsetMarking::count(&marking.h),
        downset: SubsetMarking::count(&marking.d),
        neighbourhood_u: SubsetMarking::count(&marking.u),
        neighbourhood_v: SubsetMarking::count(&marking.v),
        ..RunSummary::default()
    };
    finish(stages, params, Some(marking), summary, cfg)
}

/// Straightens what the phased flow left non-vertical (near the horizontal
/// set) by a modified flow started from the end of `prev`.
fn residual_stage(
    prev: &IsotopyTrace,
    cfg: &CompressionConfig,
    mu: f64,
    nu: f64,
) -> Result<IsotopyTrace, CompressError> {
    let m = prev.final_manifold()?;
    let frame = prev.final_frame()?;
    let t = estimate_tangent_frame(&m)?;
    let perp = perpendicularize(&m, &frame, &t)?;
    let grounding = measure_grounding(&perp, m.split());
    let mu = mu.min(grounding.epsilon / 4.0);
    if !(mu > 0.0) {
        return Err(CompressError::NotGrounded {
            epsilon: grounding.epsilon,
            mu,
        });
    }
    let beta = upwards_rotate(&perp.select(0), m.split(), mu, mu / 2.0)?;
    let locality = cfg.locality.unwrap_or_else(|| m.default_locality());
    let mut radius = nu;
    if let Some(r) = reach_of(&m, &t, locality) {
        radius = radius.min(0.9 * r);
    }
    let opts = ReachOptions {
        locality,
        tolerance: m.default_embedding_tolerance(),
    };
    let tube = TubularNeighbourhood::new(&m, &t, radius, opts)?;
    let field = globalize(&m, &beta, &tube)?;
    let h = cfg.h.unwrap_or(0.2 * radius.min(m.min_edge_length()));
    let t_max = cfg
        .t_max
        .unwrap_or_else(|| default_t_max(&m, radius, grounding.epsilon, mu))
        .max(h);
    let mut flow = FlowConfig::new(FlowMode::Modified, h, t_max);
    flow.verticality_tol = cfg.verticality_tol;
    flow.record_every = cfg.record_every;
    flow.fixed = prev.config.fixed.clone();
    let carried = carry_frame(&perp, &beta)?;
    run_flow(&m, &carried, &field, &flow, "residual")
}

/// Inserts the dropped heights (outermost pass first) into a vector of a
/// projected space.
fn lift_vector(v: &Vector, q: usize, heights: &[f64]) -> Vector {
    let mut out = v.clone();
    for &h in heights.iter().rev() {
        out = out.insert_row(q, h);
    }
    out
}

fn lift_trace(
    trace: &IsotopyTrace,
    full: AmbientSplit,
    pass: usize,
    heights: &[Vec<f64>],
) -> Result<IsotopyTrace, CompressError> {
    let q = full.q;
    let zeros = vec![0.0; heights.len()];
    let sample_heights = |i: usize| -> Vec<f64> { heights.iter().map(|h| h[i]).collect() };
    let snapshots = trace
        .snapshots
        .iter()
        .map(|s| Snapshot {
            t: s.t,
            positions: s
                .positions
                .iter()
                .enumerate()
                .map(|(i, p)| lift_vector(p, q, &sample_heights(i)))
                .collect(),
            carried: s.carried.iter().map(|c| lift_vector(c, q, &zeros)).collect(),
            extra: s
                .extra
                .iter()
                .map(|f| f.iter().map(|c| lift_vector(c, q, &zeros)).collect())
                .collect(),
        })
        .collect();
    Ok(IsotopyTrace {
        name: format!("pass{pass}-{}", trace.name),
        config: trace.config.clone(),
        topology: trace.topology,
        params: trace.params.clone(),
        split: full.with_vertical_axis(pass)?,
        snapshots,
        stats: trace.stats,
        converged: trace.converged,
    })
}

/// Straightens all `n` fields of `frame` to the `n` vertical axes, one pass
/// per field. Each pass compresses locally, then the straightened coordinate
/// is projected away and the next pass works on the projected (possibly
/// immersed) manifold; its motion is lifted back keeping the dropped heights.
pub fn compress_multi(
    m: &EmbeddedManifold,
    frame: &NormalFrame,
    cfg: &CompressionConfig,
) -> Result<CompressionResult, CompressError> {
    let full = m.split();
    let n = full.n;
    if frame.k() != n {
        return Err(FieldError::WrongFieldCount {
            expected: n,
            found: frame.k(),
        }
        .into());
    }
    let base = m.clone().with_split(AmbientSplit::new(full.q, n, 0)?)?;
    let tangents = estimate_tangent_frame(&base)?;
    let mut cur_m = base;
    let mut cur_frame = perpendicularize(&cur_m, frame, &tangents)?;
    let mut heights: Vec<Vec<f64>> = Vec::new();
    let mut stages = Vec::new();
    let mut first: Option<CompressionResult> = None;
    let mut status = CompressionStatus::Compressed;
    for pass in 0..n {
        let result = compress_local(&cur_m, &cur_frame, cfg).map_err(|e| match e {
            CompressError::Field(
                f @ (FieldError::LocalFootOutOfPatch { .. } | FieldError::AmbiguousFoot { .. }),
            ) if pass > 0 => CompressError::InducedNeighbourhoodClash { pass, source: f },
            other => other,
        })?;
        if n == 1 {
            return Ok(result);
        }
        for s in &result.stages {
            stages.push(lift_trace(s, full, pass, &heights)?);
        }
        if result.status != CompressionStatus::Compressed {
            status = result.status;
            first.get_or_insert(result);
            break;
        }
        if pass + 1 < n {
            let q = full.q;
            let fin = &result.final_manifold;
            heights.push(fin.positions().iter().map(|p| p[q]).collect());
            let positions = fin.positions().iter().map(|p| p.clone().remove_row(q)).collect();
            let split = AmbientSplit::new(q, n - pass - 1, 0)?;
            let next = EmbeddedManifold::from_parts(
                fin.topology(),
                fin.params().to_vec(),
                positions,
                split,
                Some(fin.boundary().to_vec()),
            )?;
            let rest: Vec<Vec<Vector>> = (1..result.final_frame.k())
                .map(|j| {
                    result
                        .final_frame
                        .field(j)
                        .into_iter()
                        .map(|v| v.remove_row(q))
                        .collect()
                })
                .collect();
            let t = estimate_tangent_frame(&next)?;
            cur_frame = perpendicularize(&next, &NormalFrame::from_fields(rest)?, &t)?;
            cur_m = next;
        }
        first.get_or_insert(result);
    }
    let first = first.expect("at least one pass ran");
    let params = VerifyParams {
        focus: None,
        epsilon_budget: cfg.epsilon_budget,
        ..first.verify.clone()
    };
    let last = &stages[stages.len() - 1];
    let final_manifold = last.final_manifold()?;
    // field j is the carried field at the end of pass j
    let mut pass_ends: Vec<&Snapshot> = Vec::new();
    for p in 0..n {
        if let Some(s) = stages
            .iter()
            .filter(|s| s.split.vertical_axis == p)
            .last()
        {
            pass_ends.push(s.last());
        }
    }
    let final_frame = NormalFrame::new(
        (0..m.len())
            .map(|i| pass_ends.iter().map(|s| s.carried[i].clone()).collect())
            .collect(),
        false,
    )?;
    let report = verify::verify_run(&stages, &params)?;
    let mut summary = RunSummary {
        procedure: "multi".into(),
        ..first.summary.clone()
    };
    summary.max_displacement =
        verify::max_displacement(&stages[0].first().positions, &last.last().positions);
    summary.steps = stages.iter().map(|s| s.stats.steps).sum();
    summarise_final(&mut summary, &final_manifold, cfg);
    if status == CompressionStatus::Compressed && !last.converged {
        status = CompressionStatus::NotConverged;
    }
    Ok(CompressionResult {
        status,
        stages,
        report,
        verify: params,
        final_manifold,
        final_frame,
        marking: None,
        summary,
    })
}

/// Largest angle, over samples, between field `j` and vertical axis `j`.
pub fn axis_misalignment(frame: &NormalFrame, split: AmbientSplit) -> Vec<f64> {
    (0..frame.k())
        .map(|j| {
            let mut axis = Vector::zeros(split.dim());
            axis[split.q + j] = 1.0;
            (0..frame.len())
                .map(|i| fields::angle_between(frame.vector(i, j), &axis))
                .fold(0.0, f64::max)
        })
        .collect()
}
