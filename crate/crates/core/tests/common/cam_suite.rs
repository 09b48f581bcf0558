//! Each attribution method against a hand-computed or independently traced
//! oracle on fixture backbones. Shared by the test target and the acceptance run.

use approx::assert_abs_diff_eq;
use iconoloc::backbone::stub::{FixedCamStub, STUB_TAP};
use iconoloc::backbone::{Backbone, PreparedInput, SyntheticResNet, SyntheticResNetConfig, ToyVit, ToyVitConfig};
use iconoloc::saliency::{
    generate_all, gscore_cam, grad_cam, grad_cam_pp, layer_cam, legrad, clip_surgery, rank_channels, run_method,
    score_cam, ImageSource, MethodConfig, MethodId, Registry, SaliencyError, SaliencyRequest,
};
use ndarray::{array, Array2, Array3};

use super::reference;

const TOL: f64 = 1e-6;

fn stack(channels: &[Array2<f64>]) -> Array3<f64> {
    let (h, w) = channels[0].dim();
    Array3::from_shape_fn((channels.len(), h, w), |(c, y, x)| channels[c][[y, x]])
}

fn constant_grads(acts: &Array3<f64>, per_channel: &[f64]) -> Array3<f64> {
    Array3::from_shape_fn(acts.dim(), |(c, _, _)| per_channel[c])
}

fn request() -> SaliencyRequest {
    SaliencyRequest::from_template("img", "sword", "a painting of a {class}")
}

fn stub_input(stub: &FixedCamStub) -> PreparedInput {
    PreparedInput::identity(stub.input())
}

fn assert_grid(actual: &Array2<f64>, expected: &Array2<f64>) {
    assert_eq!(actual.dim(), expected.dim());
    for (a, e) in actual.iter().zip(expected) {
        assert_abs_diff_eq!(*a, *e, epsilon = TOL);
    }
}

pub fn grad_cam_two_channel_hand_example() {
    let acts = stack(&[array![[1.0, 0.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 1.0]]]);
    let grads = constant_grads(&acts, &[0.5, -0.25]);
    let stub = FixedCamStub::new(acts, grads).unwrap();
    let map = grad_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &array![[1.0, 0.0], [0.0, 0.0]]);
    assert_eq!(map.passes.as_pair(), (1, 1));
    assert_eq!(stub.invocations(), (1, 1));
    assert!(!map.degenerate);
}

pub fn grad_cam_single_channel_is_proportional_to_activation() {
    let a = array![[4.0, 1.0], [2.0, 0.0]];
    let stub = FixedCamStub::new(stack(std::slice::from_ref(&a)), constant_grads(&stack(std::slice::from_ref(&a)), &[0.3])).unwrap();
    let map = grad_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &(a / 4.0));
}

pub fn grad_cam_all_zero_map_is_degenerate() {
    let a = array![[1.0, 2.0], [3.0, 4.0]];
    let stub = FixedCamStub::new(stack(std::slice::from_ref(&a)), constant_grads(&stack(&[a]), &[-1.0])).unwrap();
    let map = grad_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert!(map.degenerate);
    assert!(map.values.iter().all(|&v| v == 0.0));
}

pub fn grad_cam_pp_reduces_to_grad_cam_for_uniform_positive_gradients() {
    let a = array![[3.0, 1.0], [0.0, 2.0]];
    let acts = stack(std::slice::from_ref(&a));
    let stub = FixedCamStub::new(acts.clone(), constant_grads(&acts, &[0.5])).unwrap();
    let cfg = MethodConfig::default();
    let pp = grad_cam_pp(&stub, &stub_input(&stub), &request(), &cfg).unwrap();
    let plain = grad_cam(&stub, &stub_input(&stub), &request(), &cfg).unwrap();
    assert_grid(&pp.values, &array![[1.0, 1.0 / 3.0], [0.0, 2.0 / 3.0]]);
    assert_grid(&pp.values, &plain.values);
    assert_eq!(pp.passes.as_pair(), (1, 1));
}

pub fn grad_cam_pp_hand_computed_alpha_weights() {
    // Channel 1: sum A = 2, g = 1 -> alpha 1/4, g = 2 -> alpha 4/24; weight 1/4 + 2/6 = 7/12.
    // Channel 2: sum A = 2, g = 1 at two cells -> weight 1/2.
    let acts = stack(&[array![[1.0, 1.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 2.0]]]);
    let grads = stack(&[array![[1.0, 2.0], [0.0, 0.0]], array![[0.0, 0.0], [1.0, 1.0]]]);
    let stub = FixedCamStub::new(acts, grads).unwrap();
    let map = grad_cam_pp(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &array![[7.0 / 12.0, 7.0 / 12.0], [0.0, 1.0]]);
}

pub fn grad_cam_pp_all_negative_gradients_give_zero_map() {
    let acts = stack(&[array![[1.0, 2.0], [3.0, 4.0]], array![[0.5, 0.0], [1.0, 0.0]]]);
    let grads = stack(&[array![[-1.0, -2.0], [-0.5, -0.1]], array![[-3.0, -1.0], [-1.0, -1.0]]]);
    let stub = FixedCamStub::new(acts, grads).unwrap();
    let map = grad_cam_pp(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
    assert!(map.degenerate);
}

pub fn layer_cam_hand_example() {
    let acts = stack(&[array![[3.0, 5.0], [1.0, 4.0]]]);
    let grads = stack(&[array![[1.0, -1.0], [2.0, 0.0]]]);
    let stub = FixedCamStub::new(acts, grads).unwrap();
    let map = layer_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &array![[1.0, 0.0], [2.0 / 3.0, 0.0]]);
    assert_eq!(map.passes.as_pair(), (1, 1));
}

pub fn layer_cam_identical_taps_aggregate_to_single_tap() {
    let acts = stack(&[array![[3.0, 5.0], [1.0, 4.0]], array![[0.0, 1.0], [2.0, 1.0]]]);
    let grads = stack(&[array![[1.0, -1.0], [2.0, 0.0]], array![[0.5, 0.5], [-1.0, 2.0]]]);
    let stub = FixedCamStub::new(acts, grads).unwrap();
    let single = layer_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    let cfg = MethodConfig { layercam_taps: Some(vec![STUB_TAP.into(), STUB_TAP.into()]), ..Default::default() };
    let double = layer_cam(&stub, &stub_input(&stub), &request(), &cfg).unwrap();
    assert_eq!(single.values, double.values);
    assert_eq!(double.passes.as_pair(), (1, 1));
}

pub fn layer_cam_empty_tap_set_is_an_error() {
    let acts = stack(&[array![[1.0, 0.0], [0.0, 1.0]]]);
    let stub = FixedCamStub::new(acts.clone(), acts).unwrap();
    let cfg = MethodConfig { layercam_taps: Some(vec![]), ..Default::default() };
    assert!(matches!(layer_cam(&stub, &stub_input(&stub), &request(), &cfg), Err(SaliencyError::EmptyTapSet)));
}

pub fn score_cam_hand_example() {
    let acts = stack(&[array![[1.0, 1.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 2.0]]]);
    let stub = FixedCamStub::new(acts.clone(), Array3::zeros(acts.dim())).unwrap();
    let map = score_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &array![[0.5, 0.5], [0.0, 1.0]]);
    assert_eq!(map.passes.as_pair(), (2, 0));
    assert_eq!(stub.invocations(), (2, 0));
}

pub fn score_cam_single_channel() {
    let a = array![[0.2, 0.8], [0.4, 0.0]];
    let acts = stack(std::slice::from_ref(&a));
    let stub = FixedCamStub::new(acts.clone(), Array3::zeros(acts.dim())).unwrap();
    let map = score_cam(&stub, &stub_input(&stub), &request(), &MethodConfig::default()).unwrap();
    assert_grid(&map.values, &(a / 0.8));
}

pub fn score_cam_softmax_weighting() {
    // Similarities 0.5 and 0.25 -> softmax weights e^0.5 / Z and e^0.25 / Z.
    let acts = stack(&[array![[1.0, 1.0], [0.0, 0.0]], array![[0.0, 0.0], [0.0, 1.0]]]);
    let stub = FixedCamStub::new(acts.clone(), Array3::zeros(acts.dim())).unwrap();
    let cfg = MethodConfig { scorecam_softmax: true, ..Default::default() };
    let map = score_cam(&stub, &stub_input(&stub), &request(), &cfg).unwrap();
    let ratio = (0.25f64).exp() / (0.5f64).exp();
    assert_grid(&map.values, &array![[1.0, 1.0], [0.0, ratio]]);
}

fn three_channel_stub() -> FixedCamStub {
    let acts = stack(&[
        array![[1.0, 0.0], [0.5, 0.0]],
        array![[0.0, 3.0], [1.0, 0.5]],
        array![[2.0, 2.0], [0.0, 1.0]],
    ]);
    let grads = constant_grads(&acts, &[0.01, -0.9, 0.05]);
    FixedCamStub::new(acts, grads).unwrap()
}

pub fn gscore_cam_full_selection_matches_score_cam() {
    let stub = three_channel_stub();
    let input = stub_input(&stub);
    let full = score_cam(&stub, &input, &request(), &MethodConfig::default()).unwrap();
    let cfg = MethodConfig { top_k: 3, ..Default::default() };
    let g = gscore_cam(&stub, &input, &request(), &cfg).unwrap();
    assert_eq!(g.values, full.values);
    assert_eq!(g.passes.as_pair(), (4, 1));
}

pub fn gscore_cam_dominant_channel() {
    let stub = three_channel_stub();
    let cfg = MethodConfig { top_k: 1, ..Default::default() };
    let map = gscore_cam(&stub, &stub_input(&stub), &request(), &cfg).unwrap();
    assert_grid(&map.values, &array![[0.0, 1.0], [1.0 / 3.0, 0.5 / 3.0]]);
    assert_eq!(map.passes.as_pair(), (2, 1));
    assert_eq!(stub.invocations(), (2, 1));
}

pub fn gscore_cam_ranking_uses_absolute_mean_gradient_with_index_ties() {
    let acts = Array3::zeros((4, 1, 1));
    let grads = constant_grads(&acts, &[0.2, -0.5, 0.5, 0.1]);
    let fs = iconoloc::FeatureStack::new(grads, iconoloc::backbone::TapPoint::new(STUB_TAP), "stub").unwrap();
    assert_eq!(rank_channels(&fs), vec![1, 2, 0, 3]);
}

pub fn gscore_cam_top_k_out_of_range() {
    let stub = three_channel_stub();
    for k in [0, 4] {
        let cfg = MethodConfig { top_k: k, ..Default::default() };
        let e = gscore_cam(&stub, &stub_input(&stub), &request(), &cfg).unwrap_err();
        assert!(matches!(e, SaliencyError::TopKOutOfRange { channels: 3, .. }), "{e}");
    }
}

pub fn legrad_matches_finite_difference_trace() {
    let (cfg, weights) = reference::toy_weights();
    let vit = ToyVit::from_weights(cfg.clone(), weights.clone()).unwrap();
    let input = reference::toy_input();
    let req = request();
    let text = vit.encode_text(&req.prompt).unwrap();
    for layers in 1..=cfg.depth {
        let mcfg = MethodConfig { legrad_layers: layers, ..Default::default() };
        let map = legrad(&vit, &PreparedInput::identity(input.clone()), &req, &mcfg).unwrap();
        let expected = reference::legrad_map(&cfg, &weights, &input, text.values(), layers);
        assert_grid(&map.values, &expected);
        assert_eq!(map.passes.as_pair(), (1, 1));
    }
    assert_eq!(vit.invocations(), (cfg.depth, cfg.depth));
}

pub fn legrad_rejects_residual_backbones() {
    let resnet = SyntheticResNet::new(SyntheticResNetConfig::small(1)).unwrap();
    let input = PreparedInput::identity(Array3::zeros((3, 32, 32)));
    let e = legrad(&resnet, &input, &request(), &MethodConfig::default()).unwrap_err();
    assert!(matches!(e, SaliencyError::WrongFamily { .. }));
}

pub fn legrad_upsamples_patch_grid_to_image() {
    let vit = ToyVit::new(ToyVitConfig::vit_b32()).unwrap();
    let img = super::noise_image(300, 200, 4);
    let reg = Registry::new().with(MethodId::LeGrad, &vit);
    let out = generate_all(ImageSource::Rgb(&img), &request(), &reg, &MethodConfig::default());
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    assert_eq!(out.maps[0].dims(), (200, 300));
}

pub fn clip_surgery_matches_traced_forward() {
    let (cfg, weights) = reference::toy_weights();
    let vit = ToyVit::from_weights(cfg.clone(), weights.clone()).unwrap();
    let input = reference::toy_input();
    let req = request();
    let t = vit.encode_text(&req.prompt).unwrap();
    let r = vit.encode_text(&req.redundant_prompt).unwrap();
    let map = clip_surgery(&vit, &PreparedInput::identity(input.clone()), &req, &MethodConfig::default()).unwrap();
    let expected = reference::surgery_map(&cfg, &weights, &input, &t.unit(), Some(&r.unit()));
    assert_grid(&map.values, &expected);
    assert_eq!(map.passes.as_pair(), (1, 0));
    assert_eq!(vit.invocations(), (1, 0));

    let plain = MethodConfig { surgery_redundancy: false, ..Default::default() };
    let map = clip_surgery(&vit, &PreparedInput::identity(input.clone()), &req, &plain).unwrap();
    assert_grid(&map.values, &reference::surgery_map(&cfg, &weights, &input, &t.unit(), None));
}

pub fn surgery_attention_equals_standard_attention_when_q_k_v_coincide() {
    let (mut cfg, mut weights) = reference::toy_weights();
    cfg.depth = 1;
    cfg.surgery_depth = 1;
    weights.blocks.truncate(1);
    let b = &mut weights.blocks[0];
    b.wq = b.wv.clone();
    b.wk = b.wv.clone();
    b.bq = b.bv.clone();
    b.bk = b.bv.clone();
    let vit = ToyVit::from_weights(cfg.clone(), weights.clone()).unwrap();
    let input = reference::toy_input();
    // The surgery stream of a single rewritten block is the input stream plus
    // the value-value attention residual; the plain stream after attention is
    // exposed by the attention tap.
    let (_, mid) = vit.forward_with_activations(&input, &iconoloc::backbone::TapPoint::new("blocks.0.attn")).unwrap();
    let surgery = vit.surgery_tokens(&input).unwrap();
    let expected = reference::project_patch_grid(&weights, mid.values());
    for (a, e) in surgery.tokens.iter().zip(expected.iter()) {
        assert_abs_diff_eq!(*a, *e, epsilon = 1e-12);
    }
}

pub fn clip_surgery_on_residual_backbone() {
    let resnet = SyntheticResNet::new(SyntheticResNetConfig::small(3)).unwrap();
    let img = super::noise_image(50, 40, 9);
    let prepared = resnet.preprocessor().prepare(&img);
    let map = run_method(MethodId::ClipSurgery, &resnet, &prepared, &request(), &MethodConfig::default()).unwrap();
    assert_eq!(map.dims(), (40, 50));
    assert_eq!(map.passes.as_pair(), (1, 0));
    assert_eq!(resnet.invocations(), (1, 0));
}

pub fn generate_all_isolates_failures() {
    let resnet = SyntheticResNet::new(SyntheticResNetConfig::small(5)).unwrap();
    let vit = ToyVit::new(ToyVitConfig::small(5)).unwrap();
    let img = super::noise_image(24, 20, 1);
    let cfg = MethodConfig { top_k: 4, ..Default::default() };

    let full = Registry::standard(&resnet, &vit);
    let out = generate_all(ImageSource::Rgb(&img), &request(), &full, &cfg);
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let methods: Vec<MethodId> = out.maps.iter().map(|m| m.method).collect();
    assert_eq!(methods, MethodId::ALL.to_vec());
    for m in &out.maps {
        assert_eq!(m.dims(), (20, 24));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let one = Registry::new().with(MethodId::GradCam, &resnet);
    assert_eq!(generate_all(ImageSource::Rgb(&img), &request(), &one, &cfg).maps.len(), 1);

    // LeGrad on the residual backbone fails; the other six still run.
    let broken = Registry::standard(&resnet, &resnet);
    let out = generate_all(ImageSource::Rgb(&img), &request(), &broken, &cfg);
    assert_eq!(out.maps.len(), 6);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].0, MethodId::LeGrad);
}

pub fn maps_are_deterministic() {
    let resnet = SyntheticResNet::new(SyntheticResNetConfig::small(8)).unwrap();
    let vit = ToyVit::new(ToyVitConfig::small(8)).unwrap();
    let img = super::noise_image(33, 17, 2);
    let cfg = MethodConfig { top_k: 5, ..Default::default() };
    let reg = Registry::standard(&resnet, &vit);
    let a = generate_all(ImageSource::Rgb(&img), &request(), &reg, &cfg);
    let b = generate_all(ImageSource::Rgb(&img), &request(), &reg, &cfg);
    assert_eq!(a.maps, b.maps);
}

/// Every check, by name.
pub const CASES: &[(&str, fn())] = &[
    ("grad_cam_two_channel_hand_example", grad_cam_two_channel_hand_example),
    ("grad_cam_single_channel_is_proportional_to_activation", grad_cam_single_channel_is_proportional_to_activation),
    ("grad_cam_all_zero_map_is_degenerate", grad_cam_all_zero_map_is_degenerate),
    ("grad_cam_pp_reduces_to_grad_cam_for_uniform_positive_gradients", grad_cam_pp_reduces_to_grad_cam_for_uniform_positive_gradients),
    ("grad_cam_pp_hand_computed_alpha_weights", grad_cam_pp_hand_computed_alpha_weights),
    ("grad_cam_pp_all_negative_gradients_give_zero_map", grad_cam_pp_all_negative_gradients_give_zero_map),
    ("layer_cam_hand_example", layer_cam_hand_example),
    ("layer_cam_identical_taps_aggregate_to_single_tap", layer_cam_identical_taps_aggregate_to_single_tap),
    ("layer_cam_empty_tap_set_is_an_error", layer_cam_empty_tap_set_is_an_error),
    ("score_cam_hand_example", score_cam_hand_example),
    ("score_cam_single_channel", score_cam_single_channel),
    ("score_cam_softmax_weighting", score_cam_softmax_weighting),
    ("gscore_cam_full_selection_matches_score_cam", gscore_cam_full_selection_matches_score_cam),
    ("gscore_cam_dominant_channel", gscore_cam_dominant_channel),
    ("gscore_cam_ranking_uses_absolute_mean_gradient_with_index_ties", gscore_cam_ranking_uses_absolute_mean_gradient_with_index_ties),
    ("gscore_cam_top_k_out_of_range", gscore_cam_top_k_out_of_range),
    ("legrad_matches_finite_difference_trace", legrad_matches_finite_difference_trace),
    ("legrad_rejects_residual_backbones", legrad_rejects_residual_backbones),
    ("legrad_upsamples_patch_grid_to_image", legrad_upsamples_patch_grid_to_image),
    ("clip_surgery_matches_traced_forward", clip_surgery_matches_traced_forward),
    ("surgery_attention_equals_standard_attention_when_q_k_v_coincide", surgery_attention_equals_standard_attention_when_q_k_v_coincide),
    ("clip_surgery_on_residual_backbone", clip_surgery_on_residual_backbone),
    ("generate_all_isolates_failures", generate_all_isolates_failures),
    ("maps_are_deterministic", maps_are_deterministic),
];
