//! Saliency maps to boxes, and the threshold-swept box accuracy.

mod geometry;
mod mask;
mod metric;
mod report;

use thiserror::Error;

pub use geometry::{iou, size_bucket, BoundingBox, GroundTruthBox, SizeBucket, SizeCutoffs};
pub use mask::{binarize, largest_component_bbox};
pub use metric::{
    best_iou, best_tau, box_acc, build_instances, evaluate, sweep_tau, EvalConfig, EvalReport, GtMatching, Instance,
    MapProvider, MissingMaps, Predictions, ReportRow, Tally, TauPoint,
};
pub use report::TableOptions;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("no positive instances to evaluate")]
    NoInstances,
    #[error("missing maps for {} instance(s): {}", .0.len(), .0.join(", "))]
    MissingMaps(Vec<String>),
    #[error("map {key} has shape {actual:?}, image is {expected:?}")]
    MapShape { key: String, expected: (usize, usize), actual: (usize, usize) },
    #[error("loading map: {0}")]
    MapLoad(String),
}

pub type Result<T> = std::result::Result<T, LocalizationError>;
