//! The seven attribution methods behind one interface.
//!
//! Every method turns a raw relevance grid into a [`SaliencyMap`] the same
//! way: the grid is resampled onto original-image pixels through the
//! preprocessing transform and min-max normalized. The CAM-style methods
//! rectify before resampling.

mod cam;
mod score;
pub mod store;
mod transformer;

use std::fmt;
use std::str::FromStr;

use image::RgbImage;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{prompt_for, Backbone, BackboneError, PreparedInput, ScoreKind, TapPoint, Transform};
use crate::raster;

pub use cam::{grad_cam, grad_cam_pp, layer_cam};
pub use score::{gscore_cam, rank_channels, score_cam};
pub use transformer::{clip_surgery, legrad};

#[derive(Debug, Error)]
pub enum SaliencyError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("top_k = {top_k} outside 1..={channels}")]
    TopKOutOfRange { top_k: usize, channels: usize },
    #[error("tap point has no channels")]
    NoChannels,
    #[error("empty tap set")]
    EmptyTapSet,
    #[error("channel_batch must be positive")]
    ZeroBatch,
    #[error("{method} requires a {expected} backbone, got `{backbone}`")]
    WrongFamily { method: MethodId, expected: &'static str, backbone: String },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
}

pub type Result<T> = std::result::Result<T, SaliencyError>;

/// Attribution paradigm a method belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    GradientBased,
    ScoreBased,
    ModelSpecific,
}

/// The seven methods. Declaration order is the report row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodId {
    #[serde(rename = "clip-surgery")]
    ClipSurgery,
    #[serde(rename = "legrad")]
    LeGrad,
    #[serde(rename = "scorecam")]
    ScoreCam,
    #[serde(rename = "gscorecam")]
    GScoreCam,
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcam-plus")]
    GradCamPP,
    #[serde(rename = "layercam")]
    LayerCam,
}

impl MethodId {
    pub const ALL: [MethodId; 7] = [
        MethodId::ClipSurgery,
        MethodId::LeGrad,
        MethodId::ScoreCam,
        MethodId::GScoreCam,
        MethodId::GradCam,
        MethodId::GradCamPP,
        MethodId::LayerCam,
    ];

    /// Position in [`MethodId::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Identifier used in file names, CSVs and configs.
    pub fn as_str(self) -> &'static str {
        match self {
            MethodId::ClipSurgery => "clip-surgery",
            MethodId::LeGrad => "legrad",
            MethodId::ScoreCam => "scorecam",
            MethodId::GScoreCam => "gscorecam",
            MethodId::GradCam => "gradcam",
            MethodId::GradCamPP => "gradcam-plus",
            MethodId::LayerCam => "layercam",
        }
    }

    /// Name as printed in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            MethodId::ClipSurgery => "CLIP Surgery",
            MethodId::LeGrad => "LeGrad",
            MethodId::ScoreCam => "ScoreCAM",
            MethodId::GScoreCam => "gScoreCAM",
            MethodId::GradCam => "GradCAM",
            MethodId::GradCamPP => "GradCAM++",
            MethodId::LayerCam => "LayerCAM",
        }
    }

    pub fn paradigm(self) -> Paradigm {
        match self {
            MethodId::GradCam | MethodId::GradCamPP | MethodId::LayerCam | MethodId::LeGrad => Paradigm::GradientBased,
            MethodId::ScoreCam | MethodId::GScoreCam => Paradigm::ScoreBased,
            MethodId::ClipSurgery => Paradigm::ModelSpecific,
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = SaliencyError;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SaliencyError::UnknownMethod(s.to_string()))
    }
}

/// Number of full model executions spent on one map.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounter {
    pub forward_passes: usize,
    pub backward_passes: usize,
}

impl PassCounter {
    pub fn forward(&mut self, n: usize) {
        self.forward_passes += n;
    }

    pub fn backward(&mut self, n: usize) {
        self.backward_passes += n;
    }

    pub fn as_pair(self) -> (usize, usize) {
        (self.forward_passes, self.backward_passes)
    }
}

/// Per-method knobs. Each method reads only the fields that concern it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    /// Channels scored by gScoreCAM.
    pub top_k: usize,
    /// Masked inputs scored per backbone call by the score-based methods.
    pub channel_batch: usize,
    /// Replaces the backbone's default tap for the CAM methods.
    pub layer_override: Option<String>,
    /// Score that gradients are taken of.
    pub score: ScoreKind,
    /// Softmax over channel scores instead of raw similarities (ScoreCAM family).
    pub scorecam_softmax: bool,
    /// LayerCAM taps; unset means the single CAM tap.
    pub layercam_taps: Option<Vec<String>>,
    /// Number of trailing transformer blocks aggregated by LeGrad.
    pub legrad_layers: usize,
    /// Subtract the empty-class prompt embedding in CLIP Surgery.
    pub surgery_redundancy: bool,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            top_k: 300,
            channel_batch: 64,
            layer_override: None,
            score: ScoreKind::Cosine,
            scorecam_softmax: false,
            layercam_taps: None,
            legrad_layers: 2,
            surgery_redundancy: true,
        }
    }
}

impl MethodConfig {
    pub(crate) fn tap(&self, backbone: &dyn Backbone) -> TapPoint {
        match &self.layer_override {
            Some(t) => TapPoint::new(t.clone()),
            None => backbone.spec().tap_point.clone(),
        }
    }
}

/// What a map is computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyRequest {
    pub image_id: String,
    pub class: String,
    pub prompt: String,
    /// Prompt whose embedding CLIP Surgery treats as redundant.
    pub redundant_prompt: String,
}

impl SaliencyRequest {
    /// Builds the class prompt and the empty-class prompt from a template
    /// containing `{class}`.
    pub fn from_template(image_id: impl Into<String>, class: impl Into<String>, template: &str) -> Self {
        let class = class.into();
        SaliencyRequest {
            image_id: image_id.into(),
            prompt: prompt_for(template, &class),
            redundant_prompt: prompt_for(template, ""),
            class,
        }
    }
}

/// Normalized relevance over original-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub method: MethodId,
    pub prompt: String,
    pub image_id: String,
    pub class: String,
    /// The raw map carried no positive signal and was emitted as zeros.
    pub degenerate: bool,
    pub passes: PassCounter,
}

impl SaliencyMap {
    pub fn dims(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Resamples a raw grid onto original pixels and min-max normalizes it.
pub(crate) fn finish(
    raw: Array2<f64>,
    rectify: bool,
    transform: &Transform,
    method: MethodId,
    request: &SaliencyRequest,
    passes: PassCounter,
) -> Result<SaliencyMap> {
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(SaliencyError::NonFinite("raw map"));
    }
    let raw = if rectify { raster::rectify(&raw) } else { raw };
    let (values, degenerate) = raster::min_max_normalize(&transform.to_original(&raw));
    Ok(SaliencyMap {
        values,
        method,
        prompt: request.prompt.clone(),
        image_id: request.image_id.clone(),
        class: request.class.clone(),
        degenerate,
        passes,
    })
}

/// Runs one method on a preprocessed input.
pub fn run_method(
    method: MethodId,
    backbone: &dyn Backbone,
    input: &PreparedInput,
    request: &SaliencyRequest,
    cfg: &MethodConfig,
) -> Result<SaliencyMap> {
    match method {
        MethodId::GradCam => grad_cam(backbone, input, request, cfg),
        MethodId::GradCamPP => grad_cam_pp(backbone, input, request, cfg),
        MethodId::LayerCam => layer_cam(backbone, input, request, cfg),
        MethodId::ScoreCam => score_cam(backbone, input, request, cfg),
        MethodId::GScoreCam => gscore_cam(backbone, input, request, cfg),
        MethodId::LeGrad => legrad(backbone, input, request, cfg),
        MethodId::ClipSurgery => clip_surgery(backbone, input, request, cfg),
    }
}

/// Methods paired with the backbone each one runs on.
#[derive(Clone, Default)]
pub struct Registry<'a> {
    entries: Vec<(MethodId, &'a dyn Backbone)>,
}

impl<'a> Registry<'a> {
    pub fn new() -> Self {
        Registry { entries: Vec::new() }
    }

    /// Registers a method; a second registration replaces the first.
    pub fn with(mut self, method: MethodId, backbone: &'a dyn Backbone) -> Self {
        self.entries.retain(|(m, _)| *m != method);
        self.entries.push((method, backbone));
        self.entries.sort_by_key(|(m, _)| *m);
        self
    }

    /// All seven methods: LeGrad on `transformer`, the rest on `residual`.
    pub fn standard(residual: &'a dyn Backbone, transformer: &'a dyn Backbone) -> Self {
        MethodId::ALL.into_iter().fold(Registry::new(), |r, m| {
            r.with(m, if m == MethodId::LeGrad { transformer } else { residual })
        })
    }

    pub fn methods(&self) -> Vec<MethodId> {
        self.entries.iter().map(|(m, _)| *m).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (MethodId, &'a dyn Backbone)> + '_ {
        self.entries.iter().copied()
    }
}

/// Image handed to [`generate_all`].
#[derive(Debug, Clone, Copy)]
pub enum ImageSource<'a> {
    /// Decoded pixels; each backbone applies its own preprocessing.
    Rgb(&'a RgbImage),
    /// An already prepared tensor shared by all backbones.
    Prepared(&'a PreparedInput),
}

/// Maps in method order plus the methods that failed.
#[derive(Debug, Default)]
pub struct Generated {
    pub maps: Vec<SaliencyMap>,
    pub failures: Vec<(MethodId, SaliencyError)>,
}

/// Runs every registered method. A failing method is recorded and the rest
/// still run.
pub fn generate_all(image: ImageSource<'_>, request: &SaliencyRequest, registry: &Registry<'_>, cfg: &MethodConfig) -> Generated {
    let mut out = Generated::default();
    for (method, backbone) in registry.iter() {
        let prepared;
        let input = match image {
            ImageSource::Prepared(p) => p,
            ImageSource::Rgb(img) => {
                prepared = backbone.preprocessor().prepare(img);
                &prepared
            }
        };
        match run_method(method, backbone, input, request, cfg) {
            Ok(map) => out.maps.push(map),
            Err(e) => {
                log::warn!("{method} failed on {}/{}: {e}", request.image_id, request.class);
                out.failures.push((method, e));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_ids_round_trip() {
        for m in MethodId::ALL {
            assert_eq!(m.as_str().parse::<MethodId>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.as_str()));
        }
        assert!("gradcam++".parse::<MethodId>().is_err());
    }

    #[test]
    fn paradigm_groups() {
        let count = |p| MethodId::ALL.iter().filter(|m| m.paradigm() == p).count();
        assert_eq!(count(Paradigm::GradientBased), 4);
        assert_eq!(count(Paradigm::ScoreBased), 2);
        assert_eq!(count(Paradigm::ModelSpecific), 1);
    }

    #[test]
    fn request_from_template() {
        let r = SaliencyRequest::from_template("img1", "saint sebastien", "a painting of a {class}");
        assert_eq!(r.prompt, "a painting of a saint sebastien");
        assert_eq!(r.redundant_prompt, "a painting of a");
    }
}
