//! Gradient-free channel scoring (ScoreCAM) and its gradient-ranked subset
//! variant (gScoreCAM).

use ndarray::Array2;

use super::{finish, MethodConfig, MethodId, PassCounter, Result, SaliencyError, SaliencyMap, SaliencyRequest};
use crate::backbone::{similarity, Backbone, Embedding, FeatureStack, PreparedInput};
use crate::raster;

/// Channel indices ordered by decreasing absolute spatial-mean gradient.
/// Ties keep ascending channel order.
pub fn rank_channels(gradients: &FeatureStack) -> Vec<usize> {
    let keys: Vec<f64> = gradients.values().outer_iter().map(|g| raster::mean(g).abs()).collect();
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order
}

/// Scores the masked input of every listed channel against the prompt.
fn channel_weights(
    backbone: &dyn Backbone,
    input: &PreparedInput,
    acts: &FeatureStack,
    channels: &[usize],
    text: &Embedding,
    cfg: &MethodConfig,
    passes: &mut PassCounter,
) -> Result<Vec<f64>> {
    if cfg.channel_batch == 0 {
        return Err(SaliencyError::ZeroBatch);
    }
    let scale = cfg.score.scale();
    let mut weights = Vec::with_capacity(channels.len());
    for batch in channels.chunks(cfg.channel_batch) {
        let embeddings = backbone.encode_channel_masked(&input.tensor, acts, batch)?;
        passes.forward(batch.len());
        for e in &embeddings {
            weights.push(scale * similarity(e, text)?);
        }
    }
    if cfg.scorecam_softmax {
        let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        weights = exp.into_iter().map(|e| e / total).collect();
    }
    Ok(weights)
}

/// `Σ w_c A_c` over `channels`, accumulated in the order given.
fn combine(acts: &FeatureStack, channels: &[usize], weights: &[f64]) -> Array2<f64> {
    let (_, h, w) = acts.shape();
    let mut raw = Array2::zeros((h, w));
    for (&c, &wc) in channels.iter().zip(weights) {
        raw.scaled_add(wc, &acts.values().index_axis(ndarray::Axis(0), c));
    }
    raw
}

/// One masked forward pass per channel; no gradients.
pub fn score_cam(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let text = backbone.encode_text(&request.prompt)?;
    let acts = backbone.capture_activations(&input.tensor, &cfg.tap(backbone))?;
    if acts.channels() == 0 {
        return Err(SaliencyError::NoChannels);
    }
    let channels: Vec<usize> = (0..acts.channels()).collect();
    let mut passes = PassCounter::default();
    let weights = channel_weights(backbone, input, &acts, &channels, &text, cfg, &mut passes)?;
    finish(combine(&acts, &channels, &weights), true, &input.transform, MethodId::ScoreCam, request, passes)
}

/// One forward and backward pass ranks the channels; only the `top_k`
/// highest-ranked channels are scored. Selected channels are combined in
/// ascending index order, so `top_k = C` reproduces [`score_cam`] exactly.
pub fn gscore_cam(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let text = backbone.encode_text(&request.prompt)?;
    let tap = cfg.tap(backbone);
    let tg = backbone
        .activations_and_gradients(&input.tensor, &text, std::slice::from_ref(&tap), cfg.score)?
        .pop()
        .ok_or_else(|| SaliencyError::Backbone(crate::backbone::BackboneError::NotDifferentiable(tap.to_string())))?;
    let mut passes = PassCounter::default();
    passes.forward(1);
    passes.backward(1);
    let c = tg.activations.channels();
    if c == 0 {
        return Err(SaliencyError::NoChannels);
    }
    if cfg.top_k == 0 || cfg.top_k > c {
        return Err(SaliencyError::TopKOutOfRange { top_k: cfg.top_k, channels: c });
    }
    if tg.gradients.values().iter().any(|v| !v.is_finite()) {
        return Err(SaliencyError::NonFinite("gradients"));
    }
    let mut selected = rank_channels(&tg.gradients);
    selected.truncate(cfg.top_k);
    selected.sort_unstable();
    let weights = channel_weights(backbone, input, &tg.activations, &selected, &text, cfg, &mut passes)?;
    finish(combine(&tg.activations, &selected, &weights), true, &input.transform, MethodId::GScoreCam, request, passes)
}
