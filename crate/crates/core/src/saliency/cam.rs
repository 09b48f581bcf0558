//! Gradient-weighted class activation maps.

use ndarray::{Array2, Zip};

use super::{finish, MethodConfig, MethodId, PassCounter, Result, SaliencyError, SaliencyMap, SaliencyRequest};
use crate::backbone::{Backbone, BackboneError, PreparedInput, TapGradient, TapPoint, Transform};
use crate::raster::{self, EPS};

fn capture(
    backbone: &dyn Backbone,
    input: &PreparedInput,
    request: &SaliencyRequest,
    cfg: &MethodConfig,
    taps: &[TapPoint],
) -> Result<(Vec<TapGradient>, PassCounter)> {
    let text = backbone.encode_text(&request.prompt)?;
    let captured = backbone.activations_and_gradients(&input.tensor, &text, taps, cfg.score)?;
    if captured.len() != taps.len() {
        return Err(BackboneError::NotDifferentiable(format!("{} taps requested, {} returned", taps.len(), captured.len())).into());
    }
    if captured.iter().any(|t| t.gradients.values().iter().any(|v| !v.is_finite())) {
        return Err(SaliencyError::NonFinite("gradients"));
    }
    let mut passes = PassCounter::default();
    passes.forward(1);
    passes.backward(1);
    Ok((captured, passes))
}

/// `Σ_c w_c A_c`.
fn weighted_sum(tg: &TapGradient, weights: &[f64]) -> Array2<f64> {
    let (_, h, w) = tg.activations.shape();
    let mut raw = Array2::zeros((h, w));
    for (a, &wc) in tg.activations.values().outer_iter().zip(weights) {
        raw.scaled_add(wc, &a);
    }
    raw
}

pub fn grad_cam(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let (mut captured, passes) = capture(backbone, input, request, cfg, &[cfg.tap(backbone)])?;
    let tg = captured.remove(0);
    let weights: Vec<f64> = tg.gradients.values().outer_iter().map(|g| raster::mean(g)).collect();
    finish(weighted_sum(&tg, &weights), true, &input.transform, MethodId::GradCam, request, passes)
}

/// Channel weights `Σ_ij α_ij relu(g_ij)` with
/// `α = g² / (2 g² + (Σ_ab A_ab) g³)`, and `α = 0` where `g = 0`.
pub(crate) fn grad_cam_pp_weights(tg: &TapGradient) -> Vec<f64> {
    tg.activations
        .values()
        .outer_iter()
        .zip(tg.gradients.values().outer_iter())
        .map(|(a, g)| {
            let sum_a = a.sum();
            g.iter()
                .map(|&gi| {
                    if gi == 0.0 {
                        return 0.0;
                    }
                    let g2 = gi * gi;
                    let alpha = g2 / (2.0 * g2 + sum_a * g2 * gi + EPS);
                    alpha * gi.max(0.0)
                })
                .sum()
        })
        .collect()
}

pub fn grad_cam_pp(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let (mut captured, passes) = capture(backbone, input, request, cfg, &[cfg.tap(backbone)])?;
    let tg = captured.remove(0);
    let weights = grad_cam_pp_weights(&tg);
    finish(weighted_sum(&tg, &weights), true, &input.transform, MethodId::GradCamPP, request, passes)
}

/// `Σ_c relu(G_c) ⊙ A_c` at one tap.
fn layer_cam_raw(tg: &TapGradient) -> Array2<f64> {
    let (_, h, w) = tg.activations.shape();
    let mut raw = Array2::zeros((h, w));
    for (a, g) in tg.activations.values().outer_iter().zip(tg.gradients.values().outer_iter()) {
        Zip::from(&mut raw).and(&a).and(&g).for_each(|r, &a, &g| *r += g.max(0.0) * a);
    }
    raw
}

/// With several taps, each tap's map is brought to original pixels and
/// normalized, and the mean of those maps is normalized again.
pub fn layer_cam(backbone: &dyn Backbone, input: &PreparedInput, request: &SaliencyRequest, cfg: &MethodConfig) -> Result<SaliencyMap> {
    let taps: Vec<TapPoint> = match &cfg.layercam_taps {
        None => vec![cfg.tap(backbone)],
        Some(list) => list.iter().map(|t| TapPoint::new(t.clone())).collect(),
    };
    if taps.is_empty() {
        return Err(SaliencyError::EmptyTapSet);
    }
    let (captured, passes) = capture(backbone, input, request, cfg, &taps)?;
    if captured.len() == 1 {
        return finish(layer_cam_raw(&captured[0]), true, &input.transform, MethodId::LayerCam, request, passes);
    }
    let per_tap: Vec<Array2<f64>> = captured
        .iter()
        .map(|tg| raster::min_max_normalize(&input.transform.to_original(&raster::rectify(&layer_cam_raw(tg)))).0)
        .collect();
    let mut stacked = Array2::zeros(per_tap[0].raw_dim());
    for m in &per_tap {
        stacked += m;
    }
    stacked /= per_tap.len() as f64;
    let (h, w) = stacked.dim();
    finish(stacked, false, &Transform::identity(h, w), MethodId::LayerCam, request, passes)
}

