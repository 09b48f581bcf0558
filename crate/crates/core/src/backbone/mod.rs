//! Uniform access to frozen dual-encoder backbones.
//!
//! A [`Backbone`] embeds prompts and images into a shared space and exposes
//! the hooks the attribution methods need: activation capture at a tap point,
//! gradients of the image-text score with respect to those activations,
//! channel-masked scoring, per-layer attention gradients and the surgery
//! forward. Capabilities a model does not have return
//! [`BackboneError::Unsupported`].

mod conv;
mod preprocess;
pub mod stub;
mod text;
mod vit;

use std::fmt;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{SyntheticResNet, SyntheticResNetConfig};
pub use preprocess::{PreparedInput, Preprocessor, ResizeMode, Transform};
pub use text::{prompt_for, HashTextEncoder, DEFAULT_PROMPT_TEMPLATE};
pub use vit::{LayerNorm, ToyVit, ToyVitConfig, VitBlock, VitWeights};

use crate::raster;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("zero-norm embedding")]
    ZeroNorm,
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("unknown tap point `{tap}` for backbone `{backbone}`")]
    UnknownTap { backbone: String, tap: String },
    #[error("input resolution mismatch: expected {expected}x{expected}, got {height}x{width}")]
    ResolutionMismatch { expected: usize, height: usize, width: usize },
    #[error("backbone `{backbone}` does not support {capability}")]
    Unsupported { backbone: String, capability: &'static str },
    #[error("tap `{0}` is not differentiable")]
    NotDifferentiable(String),
    #[error("model load failed: {0}")]
    ModelLoad(String),
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("channel index {index} out of range for {channels} channels")]
    ChannelOutOfRange { index: usize, channels: usize },
}

pub type Result<T> = std::result::Result<T, BackboneError>;

/// Architecture family of the image encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    ConvolutionalResidual,
    VisionTransformer,
}

impl Family {
    /// Default tap: the third rectification of the final bottleneck of the last
    /// residual stage, or the final self-attention block of a transformer.
    pub fn default_tap(self) -> TapPoint {
        match self {
            Family::ConvolutionalResidual => TapPoint::new("layer4.last.relu3"),
            Family::VisionTransformer => TapPoint::new("blocks.last.attn"),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::ConvolutionalResidual => "convolutional-residual",
            Family::VisionTransformer => "vision-transformer",
        })
    }
}

/// Symbolic layer locator, resolved by each backbone.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapPoint(String);

impl TapPoint {
    pub fn new(locator: impl Into<String>) -> Self {
        TapPoint(locator.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub identifier: String,
    pub input_resolution: usize,
    pub tap_point: TapPoint,
}

impl BackboneSpec {
    /// Spec with the family's default tap point.
    pub fn new(family: Family, identifier: impl Into<String>, input_resolution: usize) -> Result<Self> {
        Self::with_tap(family, identifier, input_resolution, family.default_tap())
    }

    pub fn with_tap(
        family: Family,
        identifier: impl Into<String>,
        input_resolution: usize,
        tap_point: TapPoint,
    ) -> Result<Self> {
        if input_resolution == 0 {
            return Err(BackboneError::InvalidSpec("input_resolution must be positive".into()));
        }
        Ok(BackboneSpec { family, identifier: identifier.into(), input_resolution, tap_point })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

/// A finite, non-zero embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    modality: Modality,
}

impl Embedding {
    pub fn new(values: Vec<f64>, modality: Modality) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFinite("embedding"));
        }
        if norm(&values) <= 0.0 {
            return Err(BackboneError::ZeroNorm);
        }
        Ok(Embedding { values, modality })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn unit(&self) -> Vec<f64> {
        let n = self.norm();
        self.values.iter().map(|v| v / n).collect()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two embeddings, clamped to `[-1, 1]`.
pub fn similarity(img: &Embedding, txt: &Embedding) -> Result<f64> {
    cosine(img.values(), txt.values())
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= 0.0 || nb <= 0.0 {
        return Err(BackboneError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(e, t)` with respect to `e`.
pub(crate) fn cosine_grad(e: &[f64], t: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (ne, nt) = (norm(e), norm(t));
    if ne <= 0.0 || nt <= 0.0 {
        return Err(BackboneError::ZeroNorm);
    }
    let dot: f64 = e.iter().zip(t).map(|(x, y)| x * y).sum();
    let s = dot / (ne * nt);
    let grad = e.iter().zip(t).map(|(ei, ti)| ti / (ne * nt) - s * ei / (ne * ne)).collect();
    Ok((s, grad))
}

/// Which image-text score is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ScoreKind {
    /// Raw cosine similarity.
    #[default]
    Cosine,
    /// Temperature-scaled logit, `scale * cosine`.
    Logit { scale: f64 },
}

impl ScoreKind {
    pub fn scale(self) -> f64 {
        match self {
            ScoreKind::Cosine => 1.0,
            ScoreKind::Logit { scale } => scale,
        }
    }
}

/// Channel-major activation (or gradient) grid captured at a tap point.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    values: Array3<f64>,
    tap: TapPoint,
    backbone: String,
}

impl FeatureStack {
    pub fn new(values: Array3<f64>, tap: TapPoint, backbone: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFinite("feature stack"));
        }
        Ok(FeatureStack { values, tap, backbone: backbone.into() })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    /// `(height, width)` of the spatial grid.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn channel(&self, c: usize) -> Array2<f64> {
        self.values.index_axis(ndarray::Axis(0), c).to_owned()
    }

    pub fn tap(&self) -> &TapPoint {
        &self.tap
    }

    pub fn backbone(&self) -> &str {
        &self.backbone
    }
}

/// Activations at one tap together with the score gradient w.r.t. them.
#[derive(Debug, Clone)]
pub struct TapGradient {
    pub activations: FeatureStack,
    pub gradients: FeatureStack,
    /// The differentiated score value.
    pub score: f64,
}

/// Patch-token embeddings produced by the surgery forward, already projected
/// into the joint embedding space. Row `i` is grid cell `i` in row-major order.
#[derive(Debug, Clone)]
pub struct SurgeryTokens {
    pub grid: (usize, usize),
    pub tokens: Array2<f64>,
}

/// A frozen dual-encoder model.
///
/// Every method is deterministic for fixed weights and inputs. Inputs are
/// preprocessed `(3, R, R)` tensors produced by [`Backbone::preprocessor`].
pub trait Backbone {
    fn spec(&self) -> &BackboneSpec;

    fn preprocessor(&self) -> Preprocessor {
        Preprocessor::clip(self.spec().input_resolution)
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    /// Declared `(C, H, W)` shape of a tap point.
    fn tap_shape(&self, tap: &TapPoint) -> Result<(usize, usize, usize)>;

    /// Plain forward pass to the image embedding.
    fn encode_image(&self, input: &Array3<f64>) -> Result<Embedding>;

    /// Forward pass that also records the activations at `tap`. The embedding
    /// is identical to [`Backbone::encode_image`].
    fn forward_with_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<(Embedding, FeatureStack)>;

    /// Truncated forward that stops at `tap`. Not a full model pass.
    fn capture_activations(&self, input: &Array3<f64>, tap: &TapPoint) -> Result<FeatureStack> {
        Ok(self.forward_with_activations(input, tap)?.1)
    }

    /// One forward and one backward pass: activations at each tap and the
    /// gradient of the image-text score with respect to them.
    fn activations_and_gradients(
        &self,
        _input: &Array3<f64>,
        _text: &Embedding,
        taps: &[TapPoint],
        _score: ScoreKind,
    ) -> Result<Vec<TapGradient>> {
        Err(BackboneError::NotDifferentiable(
            taps.first().map(|t| t.to_string()).unwrap_or_default(),
        ))
    }

    /// Image embeddings of the input masked by each listed channel of `acts`.
    ///
    /// The default masks the preprocessed input elementwise with the channel's
    /// min-max normalized activation, bilinearly upsampled to input size, and
    /// runs one full forward pass per channel.
    fn encode_channel_masked(&self, input: &Array3<f64>, acts: &FeatureStack, channels: &[usize]) -> Result<Vec<Embedding>> {
        let (_, h, w) = input.dim();
        channels
            .iter()
            .map(|&c| {
                if c >= acts.channels() {
                    return Err(BackboneError::ChannelOutOfRange { index: c, channels: acts.channels() });
                }
                let up = raster::resize_bilinear(acts.values().index_axis(ndarray::Axis(0), c), h, w);
                let (mask, _) = raster::min_max_normalize(&up);
                let mut masked = input.clone();
                for mut plane in masked.outer_iter_mut() {
                    plane *= &mask;
                }
                self.encode_image(&masked)
            })
            .collect()
    }

    /// Per-layer gradients of the layer-wise image-text score with respect to
    /// each block's attention probabilities, `(heads, tokens, tokens)` each,
    /// for the last `layers` blocks. One forward and one backward pass.
    ///
    /// The layer score of block `l` is the cosine between the prompt and the
    /// token-mean of block `l`'s output pushed through the final norm and
    /// projection.
    fn layer_attention_gradients(
        &self,
        _input: &Array3<f64>,
        _text: &Embedding,
        _layers: usize,
    ) -> Result<(Vec<Array3<f64>>, (usize, usize))> {
        Err(BackboneError::Unsupported {
            backbone: self.spec().identifier.clone(),
            capability: "attention gradients",
        })
    }

    /// Single modified forward pass with value-value attention and a dual
    /// path in the rewritten blocks.
    fn surgery_tokens(&self, _input: &Array3<f64>) -> Result<SurgeryTokens> {
        Err(BackboneError::Unsupported {
            backbone: self.spec().identifier.clone(),
            capability: "surgery forward",
        })
    }
}

/// Gradient of the prompt score with respect to the activations at `tap`.
pub fn grad_of_score(
    backbone: &dyn Backbone,
    input: &Array3<f64>,
    prompt: &str,
    tap: &TapPoint,
    score: ScoreKind,
) -> Result<FeatureStack> {
    let text = backbone.encode_text(prompt)?;
    let mut captured = backbone.activations_and_gradients(input, &text, std::slice::from_ref(tap), score)?;
    let tg = captured.pop().ok_or_else(|| BackboneError::NotDifferentiable(tap.to_string()))?;
    if tg.gradients.values().iter().any(|v| !v.is_finite()) {
        return Err(BackboneError::NonFinite("gradient"));
    }
    Ok(tg.gradients)
}

pub(crate) fn check_resolution(input: &Array3<f64>, expected: usize) -> Result<()> {
    let (_, h, w) = input.dim();
    if h != expected || w != expected {
        return Err(BackboneError::ResolutionMismatch { expected, height: h, width: w });
    }
    Ok(())
}
