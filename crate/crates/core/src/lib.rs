//! Zero-shot localization benchmark for saliency maps of dual-encoder
//! vision-language models.
//!
//! The crate is organised along the pipeline:
//!
//! - [`backbone`]: frozen image/text encoders with activation and gradient taps,
//!   plus the synthetic and fixture backbones shipped with the crate.
//! - [`saliency`]: the seven attribution methods and their pass accounting.
//! - [`localization`]: box extraction, IoU and the threshold-swept BoxAcc metric.
//! - [`dataset`]: box-annotation dataset adapters and distribution statistics.
//! - [`study`]: analysis of the human ranking study (filtering, imputation,
//!   agreement, rank summaries).
//! - [`config`] and [`pipeline`]: run configuration and the generate/eval drivers.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod localization;
pub mod pipeline;
pub mod raster;
pub mod saliency;
pub mod study;

pub use backbone::{BackboneSpec, Embedding, FeatureStack, Modality};
pub use saliency::{MethodConfig, MethodId, PassCounter, SaliencyMap};
pub use localization::{BoundingBox, EvalConfig, EvalReport, GroundTruthBox, SizeBucket};
pub use dataset::DatasetIndex;
