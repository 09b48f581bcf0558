//! Attention-gradient aggregation (LeGrad) and the surgery forward
//! (CLIP Surgery).

use ndarray::{Array1, Array2, Axis};

use super::{finish, MethodConfig, MethodId, PassCounter, Result, SaliencyError, SaliencyMap, SaliencyRequest};
use crate::backbone::{Backbone, Family, PreparedInput};
use crate::raster::EPS;

/// Patch relevance of one block: rectified attention gradient, averaged over
/// heads and query rows, class-token column dropped.
pub(crate) fn legrad_layer_relevance(grad: &ndarray::Array3<f64>) -> Array1<f64> {
    let rectified = grad.mapv(|v| v.max(0.0));
    let per_head = rectified.mean_axis(Axis(0)).expect("at least one head");
    let per_key = per_head.mean_axis(Axis(0)).expect("at least one token");
    per_key.slice(ndarray::s![1..]).to_owned()
}

pub fn legrad(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    if backbone.spec().family != Family::VisionTransformer {
        return Err(SaliencyError::WrongFamily {
            method: MethodId::LeGrad,
            expected: "vision-transformer",
            backbone: backbone.spec().identifier.clone(),
        });
    }
    let text = backbone.encode_text(&request.prompt)?;
    let (grads, (gh, gw)) = backbone.layer_attention_gradients(&input.tensor, &text, cfg.legrad_layers)?;
    let mut passes = PassCounter::default();
    passes.forward(1);
    passes.backward(1);
    let mut total = Array1::zeros(gh * gw);
    for g in &grads {
        total += &legrad_layer_relevance(g);
    }
    let raw = total.into_shape_with_order((gh, gw)).expect("patch count matches grid");
    finish(raw, true, &input.transform, MethodId::LeGrad, request, passes)
}

/// Cosine of each token with `t̂ − r̂`, where `r` is the embedding of the
/// empty-class prompt. Without redundancy removal the direction is `t̂`.
pub fn clip_surgery(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let text = backbone.encode_text(&request.prompt)?;
    let mut direction = Array1::from(text.unit());
    if cfg.surgery_redundancy && !request.redundant_prompt.trim().is_empty() {
        let redundant = backbone.encode_text(&request.redundant_prompt)?;
        direction -= &Array1::from(redundant.unit());
    }
    let surgery = backbone.surgery_tokens(&input.tensor)?;
    let mut passes = PassCounter::default();
    passes.forward(1);
    let (gh, gw) = surgery.grid;
    let mut raw = Array2::zeros((gh, gw));
    for (i, tok) in surgery.tokens.outer_iter().enumerate() {
        let norm = tok.dot(&tok).sqrt();
        if norm > EPS {
            raw[[i / gw, i % gw]] = tok.dot(&direction) / norm;
        }
    }
    finish(raw, false, &input.transform, MethodId::ClipSurgery, request, passes)
}
