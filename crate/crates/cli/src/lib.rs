//! Scene runner: loads a scene, runs one of the compression procedures and
//! writes the trace, manifest, invariant report and frame exports.
//!
//! Exit codes: 0 compressed with every invariant passing, 2 compressed with a
//! failed invariant, 3 refused or not converged, 4 I/O or schema error.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use compression::compress::{CompressionConfig, CompressionResult, CompressionStatus, RunSummary};
use compression::export;
use compression::flow::{read_traces, write_trace, FlowError};
use compression::scene::{BuiltScene, Scene, SceneError};
use compression::verify::{verify_run, InvariantReport, VerifyParams};
use compression::{compress_global, compress_local, compress_multi, CompressError};

pub const RUN_FORMAT: &str = "compression-run/1";
pub const MANIFEST_FORMAT: &str = "compression-manifest/1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVARIANT: i32 = 2;
pub const EXIT_REFUSED: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Global,
    Local,
    Multi,
}

impl Mode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(Mode::Global),
            "local" => Some(Mode::Local),
            "multi" => Some(Mode::Multi),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Scene file, or the name of a builtin scene.
    pub scene: String,
    /// Overrides the scene's mode.
    pub mode: Option<Mode>,
    pub mu: Option<f64>,
    pub epsilon_budget: Option<f64>,
    pub seed: Option<u64>,
    pub record_every: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Scene { path: String, source: SceneError },
    #[error("trace: {0}")]
    Trace(#[from] FlowError),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Schema(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        EXIT_INPUT
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// First line of a trace file; the rest are stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunHeader {
    pub format: String,
    pub scene: String,
    pub mode: Mode,
    pub verify: VerifyParams,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisplacementStats {
    pub max: f64,
    pub mean: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub scene: String,
    pub mode: Mode,
    pub seed: u64,
    pub status: String,
    pub exit_code: i32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precondition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: CompressionConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub displacement: Option<DisplacementStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub double_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<InvariantReport>,
    pub artifacts: Vec<String>,
}

/// Reads a scene from a file, falling back to the builtin of that name.
pub fn load_scene(spec: &str) -> Result<Scene, CliError> {
    let path = Path::new(spec);
    if path.exists() {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        return Scene::parse(&text).map_err(|source| CliError::Scene {
            path: spec.to_string(),
            source,
        });
    }
    Scene::builtin(spec).map_err(|source| CliError::Scene {
        path: spec.to_string(),
        source,
    })
}

struct Writer {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(&path, contents).map_err(io_err(&path))?;
        self.artifacts.push(name.to_string());
        Ok(())
    }
}

/// Outcome of [`run`]: the manifest as written and the process exit code.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub exit_code: i32,
    pub manifest: Manifest,
    pub result: Option<CompressionResult>,
}

/// Runs a scene and writes all artifacts into `opts.out`. Scene and I/O
/// problems are returned as errors (exit code 4); refusals and failed
/// invariants are reported through the manifest.
pub fn run(opts: &RunOptions) -> Result<RunOutcome, CliError> {
    let scene = load_scene(&opts.scene)?;
    let built = scene.build().map_err(|source| CliError::Scene {
        path: opts.scene.clone(),
        source,
    })?;
    let mode = match opts.mode {
        Some(m) => m,
        None => match scene.mode.as_deref() {
            None => Mode::Global,
            Some(s) => Mode::parse(s).ok_or_else(|| {
                CliError::Schema(format!("{}: scene field `mode`: unknown mode {s:?}", opts.scene))
            })?,
        },
    };
    let mut cfg = built.config.clone();
    if let Some(mu) = opts.mu {
        cfg.mu = Some(mu);
    }
    if let Some(b) = opts.epsilon_budget {
        cfg.epsilon_budget = Some(b);
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(r) = opts.record_every {
        cfg.record_every = r;
    }

    let mut w = Writer::new(&opts.out)?;
    w.write("initial/samples.csv", export::samples_csv(&built.manifold).as_bytes())?;
    w.write("initial/frame.csv", export::frame_csv(&built.frame).as_bytes())?;

    let outcome = match mode {
        Mode::Global => compress_global(&built.manifold, &built.frame, &cfg),
        Mode::Local => compress_local(&built.manifold, &built.frame, &cfg),
        Mode::Multi => compress_multi(&built.manifold, &built.frame, &cfg),
    };
    let mut manifest = Manifest {
        format: MANIFEST_FORMAT.to_string(),
        scene: built.name.clone(),
        mode,
        seed: cfg.seed,
        status: String::new(),
        exit_code: EXIT_OK,
        precondition: None,
        error: None,
        config: cfg.clone(),
        summary: None,
        displacement: None,
        double_points: None,
        report: None,
        artifacts: Vec::new(),
    };
    let result = match outcome {
        Ok(r) => Some(r),
        Err(CompressError::BudgetExceeded { result, .. }) => Some(*result),
        Err(e) => {
            manifest.status = "precondition_failed".into();
            manifest.exit_code = EXIT_REFUSED;
            manifest.precondition = Some(e.precondition().unwrap_or(error_kind(&e)).to_string());
            manifest.error = Some(e.to_string());
            None
        }
    };
    if let Some(r) = &result {
        write_result(&mut w, &built, &scene, mode, r)?;
        let d = r.displacements();
        let total: f64 = d.iter().sum();
        manifest.displacement = Some(DisplacementStats {
            max: r.max_displacement(),
            mean: total / d.len().max(1) as f64,
            total,
        });
        manifest.double_points = r.summary.double_points;
        manifest.summary = Some(r.summary.clone());
        manifest.report = Some(r.report.clone());
        let (status, code) = match r.status {
            CompressionStatus::Compressed if r.report.overall => ("compressed", EXIT_OK),
            CompressionStatus::Compressed => ("compressed_with_failures", EXIT_INVARIANT),
            CompressionStatus::NotConverged => ("not_converged", EXIT_REFUSED),
            CompressionStatus::PreconditionFailed => ("precondition_failed", EXIT_REFUSED),
        };
        manifest.status = status.into();
        manifest.exit_code = code;
    }
    manifest.artifacts = w.artifacts.clone();
    manifest.artifacts.push("manifest.json".into());
    let json = serde_json::to_string_pretty(&manifest)?;
    w.write("manifest.json", json.as_bytes())?;
    Ok(RunOutcome {
        exit_code: manifest.exit_code,
        manifest,
        result,
    })
}

fn error_kind(e: &CompressError) -> &'static str {
    match e {
        CompressError::InducedNeighbourhoodClash { .. } => "induced neighbourhood",
        CompressError::InvalidConfig(_) => "configuration",
        CompressError::Field(_) => "normal field",
        CompressError::Geometry(_) => "geometry",
        CompressError::Flow(_) => "flow",
        CompressError::Verify(_) => "verification",
        _ => "precondition",
    }
}

fn write_result(
    w: &mut Writer,
    built: &BuiltScene,
    scene: &Scene,
    mode: Mode,
    r: &CompressionResult,
) -> Result<(), CliError> {
    let mut trace = Vec::new();
    let header = RunHeader {
        format: RUN_FORMAT.to_string(),
        scene: scene.name.clone(),
        mode,
        verify: r.verify.clone(),
    };
    writeln!(trace, "{}", serde_json::to_string(&header)?).expect("write to memory");
    for s in &r.stages {
        write_trace(s, &mut trace)?;
    }
    w.write("trace.jsonl", &trace)?;
    w.write("report.json", serde_json::to_string_pretty(&r.report)?.as_bytes())?;
    w.write("report.txt", r.report.to_table().as_bytes())?;
    w.write("final/samples.csv", export::samples_csv(&r.final_manifold).as_bytes())?;
    w.write("final/frame.csv", export::frame_csv(&r.final_frame).as_bytes())?;
    if let Some(marking) = &r.marking {
        w.write("marking.csv", marking.to_csv().as_bytes())?;
    }
    let dim = built.manifold.ambient_dim();
    for (k, stage) in r.stages.iter().enumerate() {
        for (j, _) in stage.snapshots.iter().enumerate() {
            let m = stage.manifold_at(j).map_err(|e| CliError::Schema(e.to_string()))?;
            if m.manifold_dim() == 1 {
                let frame = compression::NormalFrame::new(
                    stage.snapshots[j].carried.iter().map(|c| vec![c.clone()]).collect(),
                    false,
                )
                .ok();
                let svg = export::svg(&m, built.camera, frame.as_ref(), 10);
                w.write(&format!("frames/{k:02}-{}-{j:04}.svg", stage.name), svg.as_bytes())?;
            } else {
                let axes = [built.camera[0], built.camera[1], obj_third_axis(built.camera, dim)];
                let obj = export::obj(&m, axes);
                w.write(&format!("frames/{k:02}-{}-{j:04}.obj", stage.name), obj.as_bytes())?;
            }
        }
    }
    Ok(())
}

/// The lowest ambient axis not already shown by the camera.
fn obj_third_axis(camera: [usize; 2], dim: usize) -> usize {
    (0..dim).find(|a| !camera.contains(a)).unwrap_or(0)
}

/// Outcome of [`replay`].
#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub exit_code: i32,
    pub report: InvariantReport,
}

/// Re-verifies a stored trace. Writes `report.json` into `out` when given.
pub fn replay(trace: &Path, out: Option<&Path>) -> Result<ReplayOutcome, CliError> {
    let file = fs::File::open(trace).map_err(io_err(trace))?;
    let (stages, other) = read_traces(BufReader::new(file))?;
    let header = other
        .iter()
        .find_map(|l| serde_json::from_str::<RunHeader>(l).ok().filter(|h| h.format == RUN_FORMAT))
        .ok_or_else(|| CliError::Schema(format!("{}: no run header line", trace.display())))?;
    if stages.is_empty() {
        return Err(CliError::Schema(format!("{}: no stages", trace.display())));
    }
    let report = verify_run(&stages, &header.verify)
        .map_err(|e| CliError::Schema(format!("{}: {e}", trace.display())))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("report.json");
        let mut f = BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())
            .map_err(io_err(&path))?;
    }
    Ok(ReplayOutcome {
        exit_code: if report.overall { EXIT_OK } else { EXIT_INVARIANT },
        report,
    })
}
