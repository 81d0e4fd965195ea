//! Model assembly behavior: determinism, schedule correctness, ablation
//! substitutes, positional-embedding resampling, and config handling.

use gpvit::config::{preset, AttnKind, Family, ModelConfig, PropagationBlock};
use gpvit::model::{bicubic_matrix, image_token_map, Layer, Model};
use gpvit::nn::Pass;
use gpvit::rng::Prng;

fn tiny(block: PropagationBlock, attn: AttnKind) -> ModelConfig {
    ModelConfig {
        name: "tiny-test".into(),
        channels: 16,
        depth: 3,
        attn_heads: 2,
        group_heads: 2,
        ungroup_heads: 2,
        gp_positions: vec![1],
        gp_group_counts: vec![4],
        attn_kind: attn,
        propagation_block: block,
        num_classes: 5,
        input_size: 32,
        window_size: 2,
        ..ModelConfig::default()
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = Prng::seed_from(seed);
    (0..h * w * 3).map(|_| rng.uniform()).collect()
}

#[test]
fn forward_is_bit_identical_across_rebuilds() {
    let cfg = preset("tiny-train").unwrap();
    let img = rand_image(32, 32, 1);
    let run = || -> Vec<f64> {
        let model = Model::<f64>::build(&cfg, 7).unwrap();
        let pass = Pass::new(false);
        let logits = model
            .forward_classify(&pass, &image_token_map(&img, 32, 32))
            .unwrap();
        logits.data().to_vec()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 8);
    assert!(a.iter().all(|v| v.is_finite()));
    assert_eq!(a, b, "same seed must reproduce bit-identical logits");
}

#[test]
fn layer_schedule_matches_config() {
    let model = Model::<f32>::build(&preset("gpvit-l1").unwrap(), 0).unwrap();
    assert_eq!(model.layers.len(), 12);
    for (l, layer) in model.layers.iter().enumerate() {
        let want = if [1, 4, 7, 10].contains(&l) { "gp-block" } else { "lepe-attn" };
        assert_eq!(layer.kind_name(), want, "layer {l}");
    }
    if let Layer::Gp(gp) = &model.layers[1] {
        assert_eq!(gp.groups, 64);
    } else {
        panic!("layer 1 should be a gp block");
    }
    if let Layer::Gp(gp) = &model.layers[10] {
        assert_eq!(gp.groups, 16);
    } else {
        panic!("layer 10 should be a gp block");
    }
}

#[test]
fn ablation_slots_hold_the_configured_substitutes() {
    for (block, kind) in [
        (PropagationBlock::None, "identity"),
        (PropagationBlock::Conv, "conv-block"),
        (PropagationBlock::GlobalAttn, "global-attn"),
        (PropagationBlock::WinShift, "shifted-window-attn"),
        (PropagationBlock::Gp, "gp-block"),
    ] {
        let model = Model::<f32>::build(&tiny(block, AttnKind::Window), 0).unwrap();
        assert_eq!(model.layers[1].kind_name(), kind);
        assert_eq!(model.layers[0].kind_name(), "window-attn");
        assert_eq!(model.layers[2].kind_name(), "window-attn");
    }
}

#[test]
fn zeroed_head_gives_zero_logits() {
    let model = Model::<f64>::build(&tiny(PropagationBlock::Gp, AttnKind::Lepe), 3).unwrap();
    model.head.w.fill(0.0);
    model.head.b.fill(0.0);
    let pass = Pass::new(false);
    let img = image_token_map(&rand_image(32, 32, 4), 32, 32);
    let logits = model.forward_classify(&pass, &img).unwrap();
    assert_eq!(logits.shape(), &[1, 5]);
    assert!(logits.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zeroed_conv_substitute_is_identity_via_residual() {
    let cfg = tiny(PropagationBlock::Conv, AttnKind::Window);
    let model = Model::<f64>::build(&cfg, 5).unwrap();
    let none = Model::<f64>::build(&tiny(PropagationBlock::None, AttnKind::Window), 5).unwrap();
    // the conv model draws extra init randomness, so align shared params
    for p in none.params.iter() {
        model
            .params
            .find(p.name())
            .unwrap_or_else(|| panic!("missing {}", p.name()))
            .set_values(&p.values());
    }
    for p in model.params.iter() {
        if p.name().starts_with("layer1.") {
            p.fill(0.0);
        }
    }
    let img = image_token_map(&rand_image(32, 32, 6), 32, 32);
    let pass = Pass::new(false);
    let with_conv = model.forward_classify(&pass, &img).unwrap();
    let without = none.forward_classify(&pass, &img).unwrap();
    for (a, b) in with_conv.data().iter().zip(without.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn eight_pixel_input_yields_a_single_token() {
    let cfg = ModelConfig {
        input_size: 8,
        window_size: 1,
        ..tiny(PropagationBlock::Gp, AttnKind::Global)
    };
    let model = Model::<f64>::build(&cfg, 0).unwrap();
    let pass = Pass::new(false);
    let img = image_token_map(&rand_image(8, 8, 7), 8, 8);
    let (features, groups) = model.forward_features(&pass, &img, None).unwrap();
    assert_eq!(features.grid, (1, 1));
    assert_eq!(features.tokens.shape(), &[1, 16]);
    assert_eq!(groups.len(), 1);
    assert_eq!(groups[0].tokens, 1);
}

#[test]
fn indivisible_input_is_rejected() {
    let model = Model::<f64>::build(&tiny(PropagationBlock::Gp, AttnKind::Lepe), 0).unwrap();
    let pass = Pass::new(false);
    let img = image_token_map::<f64>(&rand_image(20, 20, 8), 20, 20);
    assert!(model.forward_classify(&pass, &img).is_err());
}

#[test]
fn stochastic_depth_disabled_at_eval_and_at_rate_zero() {
    let mut cfg = tiny(PropagationBlock::Gp, AttnKind::Window);
    cfg.drop_path = 0.5;
    let model = Model::<f64>::build(&cfg, 9).unwrap();
    let img = image_token_map(&rand_image(32, 32, 10), 32, 32);
    let pass = Pass::new(false);
    let eval = model.forward_classify(&pass, &img).unwrap();
    // training mode with the rate forced to zero must match eval exactly
    let mut zero_rate = cfg.clone();
    zero_rate.drop_path = 0.0;
    let model0 = Model::<f64>::build(&zero_rate, 9).unwrap();
    let mut rng = Prng::seed_from(0);
    let train0 = model0.forward_train(&pass, &img, &mut rng).unwrap();
    assert_eq!(eval.data(), train0.data());
    // with a high rate, some training draws differ from eval (layers skipped)
    let mut rng = Prng::seed_from(1);
    let mut saw_skip = false;
    for _ in 0..8 {
        let t = model.forward_train(&pass, &img, &mut rng).unwrap();
        if t.data() != eval.data() {
            saw_skip = true;
        }
    }
    assert!(saw_skip, "drop path never skipped a layer at rate 0.5");
}

#[test]
fn group_assignments_follow_the_schedule() {
    let cfg = preset("tiny-train").unwrap(); // GP at {1, 3}, M = {8, 4}
    let model = Model::<f64>::build(&cfg, 11).unwrap();
    let pass = Pass::new(false);
    let img = image_token_map(&rand_image(32, 32, 12), 32, 32);
    let (logits, groups) = model.forward_with_groups(&pass, &img).unwrap();
    assert_eq!(logits.shape(), &[1, 8]);
    assert_eq!(groups.len(), 2);
    assert_eq!(groups[0].groups, 8);
    assert_eq!(groups[1].groups, 4);
    assert_eq!(groups[0].grid, (4, 4));
    assert_eq!(groups[0].tokens, 16);
}

#[test]
fn bicubic_identity_and_constant_preservation() {
    let eye = bicubic_matrix::<f64>((4, 4), (4, 4));
    for r in 0..16 {
        for c in 0..16 {
            let want = if r == c { 1.0 } else { 0.0 };
            assert!((eye.data()[r * 16 + c] - want).abs() < 1e-12);
        }
    }
    let up = bicubic_matrix::<f64>((3, 3), (7, 7));
    assert_eq!(up.shape(), &[49, 9]);
    for r in 0..49 {
        let sum: f64 = up.data()[r * 9..(r + 1) * 9].iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "row {r} sums to {sum}");
    }
}

#[test]
fn positional_embedding_resamples_for_offsize_inputs() {
    let cfg = tiny(PropagationBlock::Gp, AttnKind::Window); // native 32 -> 4x4 grid
    let model = Model::<f64>::build(&cfg, 13).unwrap();
    let pass = Pass::new(false);
    let img = image_token_map(&rand_image(64, 64, 14), 64, 64);
    let (features, _) = model.forward_features(&pass, &img, None).unwrap();
    assert_eq!(features.grid, (8, 8));
    assert!(features.tokens.data().iter().all(|v| v.is_finite()));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = preset("gpvit-l2").unwrap();
    let text = cfg.to_toml_string().unwrap();
    let back = ModelConfig::from_toml_str(&text).unwrap();
    assert_eq!(format!("{cfg:?}"), format!("{back:?}"));
}

#[test]
fn invalid_configs_are_rejected_with_a_reason() {
    let base = preset("gpvit-l1").unwrap();
    let cases: Vec<(&str, ModelConfig)> = vec![
        ("bad patch", ModelConfig { patch_size: 12, ..base.clone() }),
        ("gpvit p16", ModelConfig { patch_size: 16, ..base.clone() }),
        ("heads", ModelConfig { attn_heads: 5, ..base.clone() }),
        ("odd lepe heads", ModelConfig { attn_heads: 9, channels: 216, ..base.clone() }),
        ("position order", ModelConfig { gp_positions: vec![4, 1, 7, 10], ..base.clone() }),
        ("position range", ModelConfig { gp_positions: vec![1, 4, 7, 12], ..base.clone() }),
        ("count mismatch", ModelConfig { gp_group_counts: vec![64, 32], ..base.clone() }),
        ("zero groups", ModelConfig { gp_group_counts: vec![64, 32, 32, 0], ..base.clone() }),
        ("input", ModelConfig { input_size: 100, ..base.clone() }),
        (
            "baseline with gp",
            ModelConfig { family: Family::VitBaseline, patch_size: 16, ..base.clone() },
        ),
        ("group heads", ModelConfig { group_heads: 5, ..base.clone() }),
        ("drop path", ModelConfig { drop_path: 1.5, ..base }),
    ];
    for (label, cfg) in cases {
        assert!(cfg.validate().is_err(), "{label} should be rejected");
    }
}

#[test]
fn unknown_preset_is_an_error_listing_known_names() {
    let err = preset("gpvit-l9").unwrap_err().to_string();
    assert!(err.contains("gpvit-l9"));
    assert!(err.contains("gpvit-l1"));
}

#[test]
fn propagation_core_presets_build_distinct_models() {
    let sizes: Vec<usize> = ["prop-none", "prop-selfattn", "prop-mixer"]
        .iter()
        .map(|n| Model::<f32>::build(&preset(n).unwrap(), 0).unwrap().params.total_numel())
        .collect();
    assert!(sizes[0] < sizes[2], "no-core model must be smaller than mixer");
    assert!(sizes[0] < sizes[1], "no-core model must be smaller than selfattn");
    assert_eq!(
        sizes[2],
        Model::<f32>::build(&preset("gpvit-l1").unwrap(), 0).unwrap().params.total_numel()
    );
}
