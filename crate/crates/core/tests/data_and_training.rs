use std::path::Path;

use lcdc::network::{FusionStage, NetConfig};
use lcdc::synthdata::{generate_sequence, segments_of, SequenceConfig, SynthConfig};
use lcdc::train::{train_toy, write_history_csv, TrainConfig};

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

#[test]
fn sequence_labels_match_golden_file() {
    let s = generate_sequence(42, &SequenceConfig::default()).unwrap();
    let mut labels = String::from("frame,label\n");
    for (i, l) in s.frame_labels.iter().enumerate() {
        labels.push_str(&format!("{i},{l}\n"));
    }
    assert_eq!(labels, golden("sequence_seed42_labels.csv"));

    let cfg = SequenceConfig::default();
    let mut segs = String::from("label,class,start,end\n");
    for g in &s.segments {
        segs.push_str(&format!("{},{},{},{}\n", g.label, cfg.snippet.classes[g.label], g.start, g.end));
    }
    assert_eq!(segs, golden("sequence_seed42_segments.csv"));
    assert_eq!(segments_of(&s.frame_labels), s.segments);
    assert_eq!(s.frames.shape()[0], s.frame_labels.len());
}

fn tiny() -> TrainConfig {
    let data = SynthConfig {
        t: 6,
        h: 16,
        w: 16,
        texture_scale: 4.0,
        speed: 1.0,
        blob_radius: 4.0,
        ..SynthConfig::default()
    };
    let net = NetConfig {
        t: 6,
        h: 16,
        w: 16,
        trunk_widths: vec![2, 4],
        trunk_strides: vec![2, 1],
        blocks: 1,
        fusion: vec![FusionStage {
            channels: 3,
            kt: 2,
            t_stride: 1,
            spatial: 3,
            pool: 2,
            pool_stride: 1,
        }],
        fc_hidden: 4,
        ..NetConfig::default()
    };
    TrainConfig {
        net,
        data,
        train_per_class: 3,
        test_per_class: 2,
        epochs: 2,
        batch: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let cfg = tiny();
    let a = train_toy(&cfg, 5).unwrap();
    let b = train_toy(&cfg, 5).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.test_predictions, b.test_predictions);
    for (x, y) in a.params.entries.iter().zip(&b.params.entries) {
        assert_eq!(x.value, y.value);
    }
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_history_csv(&pa, &a.history).unwrap();
    write_history_csv(&pb, &b.history).unwrap();
    assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());

    let other = train_toy(&cfg, 6).unwrap();
    assert_ne!(a.history, other.history);
}

#[test]
fn losses_and_parameters_stay_finite() {
    let out = train_toy(&tiny(), 1).unwrap();
    assert_eq!(out.history.len(), 2);
    for h in &out.history {
        assert!(h.data_loss.is_finite() && h.reg_loss.is_finite());
    }
    assert!(out.params.all_finite());
}

#[test]
fn zero_learning_rate_leaves_trainable_weights_untouched() {
    let cfg = TrainConfig { lr: 0.0, ..tiny() };
    let init = lcdc::network::init_params(&cfg.net, 9).unwrap();
    let out = train_toy(&cfg, 9).unwrap();
    for (a, b) in init.trainable().zip(out.params.trainable()) {
        assert_eq!(a.1.value, b.1.value, "{}", a.1.name);
    }
}

#[test]
fn weight_decay_only_changes_the_regulariser_split() {
    let with = train_toy(&TrainConfig { epochs: 1, ..tiny() }, 2).unwrap();
    let without = train_toy(
        &TrainConfig {
            epochs: 1,
            weight_decay: 0.0,
            ..tiny()
        },
        2,
    )
    .unwrap();
    assert!(with.history[0].reg_loss > 0.0);
    assert_eq!(without.history[0].reg_loss, 0.0);
}

#[test]
fn mismatched_config_is_rejected() {
    let mut cfg = tiny();
    cfg.net.classes = 3;
    assert!(train_toy(&cfg, 0).is_err());
    let mut cfg = tiny();
    cfg.net.fusion[0].kt = 9;
    assert!(train_toy(&cfg, 0).is_err());
}
