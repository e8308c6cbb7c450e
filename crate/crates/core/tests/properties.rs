//! Randomised invariants across modules.

use lcdc::metrics::{edit_score, f1_at_k, frame_accuracy};
use lcdc::motion::{local_motion, receptive_field_diff};
use lcdc::network::{offset_learner_params, param_count, temporal_table, FusionStage, NetConfig, Variant};
use lcdc::rng::XorShift64;
use lcdc::synthdata::segments_of;
use lcdc::train::cross_entropy;
use lcdc::{
    bilinear_sample, conv2d, deform_input, deformable_conv2d, expand_local_to_dense, lcdc_conv2d, ExpandMode,
    KernelSpec, LocalOffsets, Tensor,
};
use proptest::prelude::*;

fn random_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = XorShift64::new(seed);
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}

fn spec_strategy() -> impl Strategy<Value = KernelSpec> {
    (1usize..4, 1usize..4, 1usize..5, 1usize..5, 1usize..3, 1usize..3, 0usize..3).prop_map(
        |(kh, kw, ci, co, s, d, p)| KernelSpec::new(kh, kw, ci, co).with_stride(s).with_dilation(d).with_padding(p),
    )
}

fn labels(max_len: usize, classes: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..classes, 0..=max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lcdc_direct_matches_factorized_bitwise(spec in spec_strategy(), h in 7usize..12, w in 7usize..12, seed: u64) {
        let x = random_tensor(&[h, w, spec.in_channels], seed, -1.0, 1.0);
        let wt = random_tensor(&spec.weight_shape(), seed ^ 1, -1.0, 1.0);
        let off = LocalOffsets::new(random_tensor(&[h, w, 2], seed ^ 2, -2.5, 2.5)).unwrap();
        let direct = lcdc_conv2d(&x, &wt, &off, &spec).unwrap();
        let fact = conv2d(&deform_input(&x, &off).unwrap(), &wt, &spec).unwrap();
        prop_assert_eq!(direct.data(), fact.data());
        let dense = expand_local_to_dense(&off, &spec, ExpandMode::Shifted).unwrap();
        let dc = deformable_conv2d(&x, &wt, &dense, &spec).unwrap();
        prop_assert!(direct.max_abs_diff(&dc).unwrap() <= 1e-12);
    }

    #[test]
    fn integer_offsets_shift_the_input(h in 5usize..10, w in 5usize..10, dr in -2i32..3, dc in -2i32..3, seed: u64) {
        let x = random_tensor(&[h, w, 2], seed, 0.0, 1.0);
        let off = LocalOffsets::constant(h, w, (dr as f64, dc as f64));
        let y = deform_input(&x, &off).unwrap();
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = (r as i32 + dr, c as i32 + dc);
                for k in 0..2 {
                    let want = if sr >= 0 && sc >= 0 && (sr as usize) < h && (sc as usize) < w {
                        x.get(&[sr as usize, sc as usize, k])
                    } else {
                        0.0
                    };
                    prop_assert_eq!(y.get(&[r, c, k]), want);
                }
            }
        }
    }

    #[test]
    fn bilinear_is_exact_on_lattice_and_bounded(h in 2usize..8, w in 2usize..8, r in 0.0f64..7.0, c in 0.0f64..7.0, seed: u64) {
        let plane = random_tensor(&[h, w], seed, -1.0, 1.0);
        let (ri, ci) = ((r as usize).min(h - 1), (c as usize).min(w - 1));
        prop_assert_eq!(bilinear_sample(&plane, (ri as f64, ci as f64)).unwrap(), plane.get(&[ri, ci]));
        let v = bilinear_sample(&plane, (r, c)).unwrap();
        prop_assert!(v.abs() <= plane.max_abs() + 1e-15);
    }

    #[test]
    fn motion_differences_telescope(h in 2usize..6, w in 2usize..6, seed: u64) {
        let a = LocalOffsets::new(random_tensor(&[h, w, 2], seed, -2.0, 2.0)).unwrap();
        let b = LocalOffsets::new(random_tensor(&[h, w, 2], seed ^ 7, -2.0, 2.0)).unwrap();
        let c = LocalOffsets::new(random_tensor(&[h, w, 2], seed ^ 9, -2.0, 2.0)).unwrap();
        let ab = local_motion(&b, &a).unwrap();
        let ba = local_motion(&a, &b).unwrap();
        prop_assert_eq!(ab.tensor().add(ba.tensor()).unwrap().max_abs(), 0.0);
        let bc = local_motion(&c, &b).unwrap();
        let ac = local_motion(&c, &a).unwrap();
        let sum = ab.tensor().add(bc.tensor()).unwrap();
        prop_assert!(sum.max_abs_diff(ac.tensor()).unwrap() <= 1e-12);
    }

    #[test]
    fn constant_local_fields_give_zero_receptive_field_motion(v in (-2.0f64..2.0, -2.0f64..2.0), spec in spec_strategy()) {
        let f = LocalOffsets::constant(9, 9, v);
        let d = expand_local_to_dense(&f, &spec, ExpandMode::Shifted).unwrap();
        prop_assert_eq!(receptive_field_diff(&d, &d.clone()).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn offset_ratio_is_groups_times_taps(kh in 1usize..6, kw in 1usize..6, c in 1usize..64, g in 1usize..9) {
        let local = offset_learner_params(kh, kw, c, None);
        let dense = offset_learner_params(kh, kw, c, Some(g));
        prop_assert_eq!(dense, g * kh * kw * local);
    }

    #[test]
    fn network_ratio_is_groups_times_taps(k in prop::sample::select(vec![1usize, 3, 5]), g in prop::sample::select(vec![1usize, 2, 4, 8]), blocks in 1usize..4) {
        let cfg = NetConfig { block_kernel: k, groups: g, blocks, ..NetConfig::default() };
        let l = param_count(&cfg, Variant::Lcdc).unwrap();
        let d = param_count(&cfg, Variant::Dense).unwrap();
        prop_assert_eq!(d.deform_related, g * k * k * l.deform_related);
        prop_assert!(d.total >= l.total);
    }

    #[test]
    fn temporal_table_follows_floor_arithmetic(steps in 1usize..60, kt in 1usize..5, s in 1usize..3, p in 1usize..3, ps in 1usize..3) {
        let st = FusionStage { kt, t_stride: s, pool: p, pool_stride: ps, ..FusionStage::default() };
        let rows = temporal_table(steps, &[st, st]);
        let mut n = steps;
        for r in &rows {
            prop_assert_eq!(r.input, n);
            let (k, stride) = if r.op == "conv" { (kt, s) } else { (p, ps) };
            let want = if n >= k { (n - k) / stride + 1 } else { 0 };
            prop_assert_eq!(r.output, want);
            n = r.output;
        }
        prop_assert!(rows.len() == 4 || rows.last().unwrap().output == 0);
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(logits in prop::collection::vec(-5.0f64..5.0, 2..6), shift in -50.0f64..50.0, label_seed: usize) {
        let params = Default::default();
        let label = label_seed % logits.len();
        let a = cross_entropy(&logits, label, &params, 0.0).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let b = cross_entropy(&shifted, label, &params, 0.0).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn segments_partition_the_labels(l in labels(30, 4)) {
        let segs = segments_of(&l);
        let mut rebuilt = Vec::new();
        for (i, s) in segs.iter().enumerate() {
            prop_assert!(s.end > s.start);
            if i > 0 {
                prop_assert_eq!(segs[i - 1].end, s.start);
                prop_assert_ne!(segs[i - 1].label, s.label);
            }
            rebuilt.extend(std::iter::repeat_n(s.label, s.end - s.start));
        }
        prop_assert_eq!(rebuilt, l);
    }

    #[test]
    fn metrics_are_invariant_to_relabeling(p in labels(12, 3), g in labels(12, 3), perm in Just([2usize, 0, 1])) {
        let rp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
        let rg: Vec<usize> = g.iter().map(|&v| perm[v]).collect();
        prop_assert_eq!(edit_score(&p, &g, None), edit_score(&rp, &rg, None));
        for k in [10.0, 25.0, 50.0] {
            prop_assert_eq!(f1_at_k(&p, &g, k, None).unwrap(), f1_at_k(&rp, &rg, k, None).unwrap());
        }
        if p.len() == g.len() && !g.is_empty() {
            prop_assert_eq!(frame_accuracy(&p, &g).unwrap(), frame_accuracy(&rp, &rg).unwrap());
        }
    }

    #[test]
    fn f1_does_not_increase_with_overlap(p in labels(15, 3), g in labels(15, 3)) {
        let mut last = f64::INFINITY;
        for k in [1.0, 10.0, 25.0, 50.0, 75.0, 100.0] {
            let v = f1_at_k(&p, &g, k, None).unwrap();
            prop_assert!(v <= last);
            prop_assert!((0.0..=100.0).contains(&v));
            last = v;
        }
        let e = edit_score(&p, &g, None);
        prop_assert!((0.0..=100.0).contains(&e));
    }

    #[test]
    fn tsr_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed: u64) {
        let t = random_tensor(&shape, seed, -1e6, 1e6);
        let back = Tensor::read_tsr(t.to_tsr_bytes().as_slice()).unwrap();
        prop_assert_eq!(back, t);
    }
}
