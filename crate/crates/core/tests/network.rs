use lcdc::network::{
    forward_snippet, frame_offsets, init_params, load_checkpoint, save_checkpoint, FusionStage, NetConfig,
    NetParams, Variant,
};
use lcdc::rng::XorShift64;
use lcdc::Tensor;

fn small_config() -> NetConfig {
    NetConfig {
        t: 5,
        h: 12,
        w: 12,
        trunk_widths: vec![3, 4],
        trunk_strides: vec![2, 1],
        blocks: 2,
        fusion: vec![FusionStage {
            channels: 5,
            kt: 2,
            t_stride: 1,
            spatial: 3,
            pool: 2,
            pool_stride: 1,
        }],
        fc_hidden: 6,
        classes: 3,
        ..NetConfig::default()
    }
}

fn random_frames(cfg: &NetConfig, seed: u64) -> Tensor {
    let mut rng = XorShift64::new(seed);
    Tensor::from_fn(&[cfg.t, cfg.h, cfg.w, cfg.c], |_| rng.uniform())
}

/// Offset learners set to small non-zero values so the motion path is live.
fn with_live_offsets(mut p: NetParams, seed: u64) -> NetParams {
    let mut rng = XorShift64::new(seed);
    for e in &mut p.entries {
        if e.name.contains(".phi") {
            e.value.data_mut().iter_mut().for_each(|v| *v = rng.range(-0.05, 0.05));
        }
    }
    p
}

#[test]
fn identical_inputs_give_identical_logits() {
    let cfg = small_config();
    let p = with_live_offsets(init_params(&cfg, 3).unwrap(), 4);
    let x = random_frames(&cfg, 9);
    let a = forward_snippet(&x, &p, &cfg).unwrap();
    let b = forward_snippet(&x.clone(), &p.clone(), &cfg).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.offsets, b.offsets);
}

#[test]
fn zero_frames_and_zero_learners_give_zero_offsets() {
    let cfg = small_config();
    let p = init_params(&cfg, 1).unwrap();
    let x = Tensor::zeros(&[cfg.t, cfg.h, cfg.w, cfg.c]);
    let out = forward_snippet(&x, &p, &cfg).unwrap();
    assert_eq!(out.offsets.len(), cfg.blocks);
    for o in &out.offsets {
        assert!(o.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fusion_input_width_is_appearance_plus_two_per_block() {
    let cfg = NetConfig::default();
    assert_eq!(cfg.fusion_in_channels(), cfg.feature_channels() + 2 * cfg.blocks);
    let dense = NetConfig {
        variant: Variant::Dense,
        groups: 2,
        ..NetConfig::default()
    };
    assert_eq!(dense.fusion_in_channels(), 8 + 3 * 2 * 9 * 2);
}

#[test]
fn offsets_per_frame_match_the_snippet_forward() {
    let cfg = small_config();
    let p = with_live_offsets(init_params(&cfg, 5).unwrap(), 6);
    let x = random_frames(&cfg, 2);
    let snip = forward_snippet(&x, &p, &cfg).unwrap();
    let per_frame = frame_offsets(&x, &p, &cfg).unwrap();
    for (a, b) in snip.offsets.iter().zip(&per_frame) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b).unwrap() == 0.0);
    }
    // A single frame on its own gives the same field as inside the stack.
    let one = frame_offsets(&x.slice_outer(3).unwrap().reshape(&[1, cfg.h, cfg.w, 1]).unwrap(), &p, &cfg).unwrap();
    assert_eq!(one[0].data(), per_frame[0].slice_outer(3).unwrap().data());
}

#[test]
fn zero_learners_make_logits_invariant_to_frame_order_under_pointwise_fusion() {
    let cfg = NetConfig {
        fusion: vec![FusionStage {
            channels: 4,
            kt: 1,
            t_stride: 1,
            spatial: 1,
            pool: 1,
            pool_stride: 1,
        }],
        ..small_config()
    };
    let p = init_params(&cfg, 8).unwrap();
    let x = random_frames(&cfg, 11);
    let base = forward_snippet(&x, &p, &cfg).unwrap();
    // Frame 0 only feeds motion, so any order of the later frames is equivalent.
    let order = [0, 3, 1, 4, 2];
    let frames: Vec<Tensor> = order.iter().map(|&i| x.slice_outer(i).unwrap()).collect();
    let shuffled = Tensor::stack(&frames).unwrap();
    let out = forward_snippet(&shuffled, &p, &cfg).unwrap();
    for (a, b) in base.logits.iter().zip(&out.logits) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn wrong_extents_are_rejected() {
    let cfg = small_config();
    let p = init_params(&cfg, 0).unwrap();
    let x = Tensor::zeros(&[cfg.t, cfg.h + 1, cfg.w, 1]);
    assert!(forward_snippet(&x, &p, &cfg).is_err());
    let short = Tensor::zeros(&[cfg.t - 1, cfg.h, cfg.w, 1]);
    assert!(forward_snippet(&short, &p, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let cfg = small_config();
    let p = with_live_offsets(init_params(&cfg, 12).unwrap(), 13);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg, &p).unwrap();
    let (cfg2, p2) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(p.entries.len(), p2.entries.len());
    for (a, b) in p.entries.iter().zip(&p2.entries) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    let victim = dir.path().join("fc2.b.tsr");
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("digest"), "{err}");
}

#[test]
fn config_json_round_trip_and_invalid_fusion() {
    let cfg = NetConfig::default();
    let back = NetConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(cfg, back);
    let bad = NetConfig {
        fusion: vec![FusionStage::default(), FusionStage::default()],
        ..NetConfig::default()
    };
    assert!(bad.validate().is_err());
    let long = NetConfig {
        t: 27,
        fusion: vec![FusionStage::default(), FusionStage::default()],
        ..NetConfig::default()
    };
    long.validate().unwrap();
}
