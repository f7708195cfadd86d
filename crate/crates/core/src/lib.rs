//! Numerical compression of embedded manifolds.
//!
//! A manifold `M` sampled in `Q x R^n` and carrying one or more normal vector
//! fields is isotoped, by explicit integration of an ambient flow, until every
//! field points along a vertical coordinate axis. The modules follow the
//! construction step by step:
//!
//! * [`geometry`]: sampled manifolds, tangent estimation, reach, projection.
//! * [`fields`]: perpendicular/grounded fields, upwards rotation, the global
//!   ambient field, horizontal set, downset, localisation, general position.
//! * [`flow`]: RK4 integration of the global, modified and phased flows.
//! * [`verify`]: the quantitative bounds checked on every trace.
//! * [`compress`]: the global, local and multi-field drivers.
//! * [`scene`] and [`export`]: scene files and artifact writers.

pub mod compress;
pub mod export;
pub mod fields;
pub mod flow;
pub mod geometry;
pub mod scene;
pub mod smooth;
pub mod verify;

/// Ambient vectors and points. The ambient dimension is only known at run time.
pub type Vector = nalgebra::DVector<f64>;

pub use compress::{
    compress_global, compress_local, compress_multi, CompressError, CompressionConfig,
    CompressionResult, CompressionStatus,
};
pub use fields::{AmbientField, GroundingReport, NormalFrame, SubsetMarking};
pub use flow::{FlowConfig, FlowMode, IsotopyTrace};
pub use geometry::{AmbientSplit, EmbeddedManifold, TangentFrame, Topology, TubularNeighbourhood};
pub use verify::InvariantReport;
