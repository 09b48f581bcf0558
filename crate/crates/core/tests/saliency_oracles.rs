mod common;

macro_rules! cases {
    ($($name:ident),* $(,)?) => {
        $(#[test]
        fn $name() {
            common::cam_suite::$name();
        })*

        #[test]
        fn case_list_is_complete() {
            let listed = [$(stringify!($name)),*];
            let names: Vec<&str> = common::cam_suite::CASES.iter().map(|c| c.0).collect();
            assert_eq!(names, listed);
        }
    };
}

cases!(
    grad_cam_two_channel_hand_example,
    grad_cam_single_channel_is_proportional_to_activation,
    grad_cam_all_zero_map_is_degenerate,
    grad_cam_pp_reduces_to_grad_cam_for_uniform_positive_gradients,
    grad_cam_pp_hand_computed_alpha_weights,
    grad_cam_pp_all_negative_gradients_give_zero_map,
    layer_cam_hand_example,
    layer_cam_identical_taps_aggregate_to_single_tap,
    layer_cam_empty_tap_set_is_an_error,
    score_cam_hand_example,
    score_cam_single_channel,
    score_cam_softmax_weighting,
    gscore_cam_full_selection_matches_score_cam,
    gscore_cam_dominant_channel,
    gscore_cam_ranking_uses_absolute_mean_gradient_with_index_ties,
    gscore_cam_top_k_out_of_range,
    legrad_matches_finite_difference_trace,
    legrad_rejects_residual_backbones,
    legrad_upsamples_patch_grid_to_image,
    clip_surgery_matches_traced_forward,
    surgery_attention_equals_standard_attention_when_q_k_v_coincide,
    clip_surgery_on_residual_backbone,
    generate_all_isolates_failures,
    maps_are_deterministic,
);
