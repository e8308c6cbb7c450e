//! Seeded verification suites shared by the CLI and the acceptance tests.

use serde::Serialize;

use crate::autodiff::{finite_diff_check, CheckLoss, Graph, Var};
use crate::conv::{conv2d, Conv3dSpec, KernelSpec};
use crate::deform::{
    deform_input, deformable_conv2d, expand_local_to_dense, lcdc_conv2d, DenseOffsets, ExpandMode,
    LocalOffsets,
};
use crate::error::Result;
use crate::motion::{local_motion, receptive_field_diff};
use crate::network::{FusionStage, NetConfig, Variant};
use crate::rng::{hash_seed, XorShift64};
use crate::tensor::Tensor;
use crate::train::network_gradcheck;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteRow {
    pub check: String,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl SuiteRow {
    fn new(check: &str, instances: usize, max_err: f64, tol: f64) -> Self {
        Self {
            check: check.to_string(),
            instances,
            max_err,
            tol,
            pass: max_err <= tol,
        }
    }
}

fn random(shape: &[usize], rng: &mut XorShift64, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range(lo, hi))
}

fn random_spec(rng: &mut XorShift64, c_in: usize, c_out: usize) -> KernelSpec {
    let kh = 1 + rng.below(3);
    let kw = 1 + rng.below(3);
    KernelSpec::new(kh, kw, c_in, c_out)
        .with_stride(1 + rng.below(2))
        .with_dilation(1 + rng.below(2))
        .with_padding(rng.below(3))
}

/// Over `instances` random cases (maps up to 16×16, up to 8 channels):
/// LCDC against deformable convolution with shifted offsets, LCDC against
/// the deform-then-convolve factorization, and both deformable forms with
/// zero offsets against plain convolution.
pub fn equivalence_suite(instances: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let tol = 1e-12;
    let (mut dc, mut fact, mut zero) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..instances {
        let mut rng = XorShift64::new(hash_seed(&[seed, i as u64]));
        let (h, w) = (6 + rng.below(11), 6 + rng.below(11));
        let (ci, co) = (1 + rng.below(8), 1 + rng.below(8));
        let spec = random_spec(&mut rng, ci, co);
        let x = random(&[h, w, ci], &mut rng, -1.0, 1.0);
        let wt = random(&spec.weight_shape(), &mut rng, -1.0, 1.0);
        let off = LocalOffsets::new(random(&[h, w, 2], &mut rng, -2.0, 2.0))?;
        let y = lcdc_conv2d(&x, &wt, &off, &spec)?;
        let dense = expand_local_to_dense(&off, &spec, ExpandMode::Shifted)?;
        dc = dc.max(y.max_abs_diff(&deformable_conv2d(&x, &wt, &dense, &spec)?)?);
        fact = fact.max(y.max_abs_diff(&conv2d(&deform_input(&x, &off)?, &wt, &spec)?)?);
        let base = conv2d(&x, &wt, &spec)?;
        let z = lcdc_conv2d(&x, &wt, &LocalOffsets::zeros(h, w), &spec)?;
        let (oh, ow) = (base.shape()[0], base.shape()[1]);
        let zd = deformable_conv2d(&x, &wt, &DenseOffsets::zeros(oh, ow, 1, spec.taps()), &spec)?;
        zero = zero.max(base.max_abs_diff(&z)?).max(base.max_abs_diff(&zd)?);
    }
    Ok(vec![
        SuiteRow::new("lcdc_vs_shifted_deformable", instances, dc, tol),
        SuiteRow::new("lcdc_vs_deform_then_conv", instances, fact, tol),
        SuiteRow::new("zero_offsets_vs_conv2d", instances, zero, tol),
    ])
}

/// Offsets held constant over time, for the standard (zero offsets) and
/// dilated cases: both the receptive-field and the local-motion
/// differences must be exactly zero.
pub fn degeneracy_suite(frames: usize, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    for (name, dilation, nonzero) in [("standard", 1, false), ("dilated", 2, true)] {
        let mut rng = XorShift64::new(hash_seed(&[seed, dilation]));
        let spec = KernelSpec::same(3, 4, 4)
            .with_dilation(dilation as usize)
            .with_padding(dilation as usize);
        let (h, w) = (9, 11);
        let field = if nonzero {
            random(&[h, w, 2], &mut rng, -1.5, 1.5)
        } else {
            Tensor::zeros(&[h, w, 2])
        };
        let local = LocalOffsets::new(field)?;
        let dense = expand_local_to_dense(&local, &spec, ExpandMode::Shifted)?;
        let (mut rdd, mut rd) = (0.0f64, 0.0f64);
        let mut prev: Option<(LocalOffsets, DenseOffsets)> = None;
        for _ in 0..frames {
            let cur = (local.clone(), dense.clone());
            if let Some((pl, pd)) = &prev {
                rd = rd.max(local_motion(&cur.0, pl)?.tensor().max_abs());
                rdd = rdd.max(receptive_field_diff(&cur.1, pd)?.max_abs());
                let fields = cur.1.receptive_field(&spec)?.sub(&pd.receptive_field(&spec)?)?;
                rdd = rdd.max(fields.max_abs());
            }
            prev = Some(cur);
        }
        rows.push(SuiteRow::new(&format!("{name}_rddot"), frames, rdd, 0.0));
        rows.push(SuiteRow::new(&format!("{name}_rdot"), frames, rd, 0.0));
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradRow {
    pub op: String,
    pub leaf: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    leaves: Vec<(&'static str, Tensor)>,
    loss: CheckLoss,
    build: Builder,
}

/// Small network used for the end-to-end gradient check.
pub fn mini_net_config() -> NetConfig {
    NetConfig {
        t: 4,
        h: 8,
        w: 8,
        c: 1,
        trunk_widths: vec![2, 4],
        trunk_strides: vec![2, 1],
        blocks: 2,
        fusion: vec![FusionStage {
            channels: 3,
            kt: 2,
            t_stride: 1,
            spatial: 3,
            pool: 2,
            pool_stride: 1,
        }],
        fc_hidden: 4,
        classes: 3,
        ..NetConfig::default()
    }
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = XorShift64::new(hash_seed(&[seed, 0x6AD]));
    let r = &mut rng;
    let s3 = KernelSpec::same(3, 3, 2);
    let grouped = KernelSpec::same(3, 4, 2).with_groups(2);
    let strided = KernelSpec::new(2, 3, 2, 3).with_stride(2).with_dilation(2).with_padding(1);
    let c3 = Conv3dSpec {
        kt: 2,
        t_stride: 1,
        spatial: KernelSpec::same(3, 2, 2),
    };
    // Offsets are drawn from (0.2, 0.8) shifted by integers so every
    // sampling coordinate sits at least 0.1 from the lattice.
    let frac = |r: &mut XorShift64, shape: &[usize]| {
        Tensor::from_fn(shape, |_| r.range(0.2, 0.8) + (r.below(3) as f64 - 1.0))
    };
    let mut cases = vec![
        OpCase {
            name: "conv2d",
            leaves: vec![("x", random(&[2, 5, 5, 2], r, -1.0, 1.0)), ("w", random(&strided.weight_shape(), r, -1.0, 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(move |g, v| g.conv2d(v[0], v[1], strided)),
        },
        OpCase {
            name: "conv3d",
            leaves: vec![("x", random(&[1, 4, 4, 3, 2], r, -1.0, 1.0)), ("w", random(&c3.weight_shape(), r, -1.0, 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(move |g, v| g.conv3d(v[0], v[1], c3)),
        },
        OpCase {
            name: "bias_add",
            leaves: vec![("x", random(&[2, 3, 2], r, -1.0, 1.0)), ("b", random(&[2], r, -1.0, 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| g.bias_add(v[0], v[1])),
        },
        OpCase {
            name: "deform_input",
            leaves: vec![("x", random(&[1, 5, 4, 3], r, -1.0, 1.0)), ("offsets", frac(r, &[1, 5, 4, 2]))],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| g.deform_input(v[0], v[1])),
        },
        OpCase {
            name: "lcdc_conv2d",
            leaves: vec![
                ("x", random(&[1, 5, 5, 3], r, -1.0, 1.0)),
                ("w", random(&s3.weight_shape(), r, -1.0, 1.0)),
                ("offsets", frac(r, &[1, 5, 5, 2])),
            ],
            loss: CheckLoss::SumSquares,
            build: Box::new(move |g, v| g.lcdc_conv2d(v[0], v[1], v[2], s3)),
        },
        OpCase {
            name: "deformable_conv2d",
            leaves: vec![
                ("x", random(&[1, 4, 4, 4], r, -1.0, 1.0)),
                ("w", random(&grouped.weight_shape(), r, -1.0, 1.0)),
                ("offsets", frac(r, &[1, 4, 4, 2, 9, 2])),
            ],
            loss: CheckLoss::SumSquares,
            build: Box::new(move |g, v| g.deformable_conv2d(v[0], v[1], v[2], grouped)),
        },
    ];
    for (name, mode) in [("expand_shifted", ExpandMode::Shifted), ("expand_replicated", ExpandMode::Replicated)] {
        cases.push(OpCase {
            name,
            leaves: vec![
                ("x", random(&[1, 4, 4, 4], r, -1.0, 1.0)),
                ("w", random(&grouped.weight_shape(), r, -1.0, 1.0)),
                ("offsets", frac(r, &[1, 4, 4, 2])),
            ],
            loss: CheckLoss::SumSquares,
            build: Box::new(move |g, v| {
                let d = g.expand_offsets(v[2], grouped, mode)?;
                g.deformable_conv2d(v[0], v[1], d, grouped)
            }),
        });
    }
    cases.extend([
        OpCase {
            name: "bilinear_sample",
            leaves: vec![("plane", random(&[4, 5], r, -1.0, 1.0)), ("point", frac(r, &[2]).map(|v| v + 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| g.sample(v[0], v[1])),
        },
        OpCase {
            name: "batch_norm_relu",
            leaves: vec![
                ("x", random(&[6, 3], r, -1.0, 1.0)),
                ("gamma", random(&[3], r, 0.5, 1.5)),
                ("beta", random(&[3], r, -0.5, 0.5)),
            ],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| {
                let y = g.batch_norm(v[0], v[1], v[2])?;
                g.relu(y)
            }),
        },
        OpCase {
            name: "temporal_diff_concat",
            leaves: vec![("x", random(&[6, 2, 2], r, -1.0, 1.0)), ("m", random(&[6, 2, 1], r, -1.0, 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| {
                let a = g.drop_first(v[0], 3)?;
                let d = g.temporal_diff(v[1], 3)?;
                let c = g.concat(&[a, d])?;
                g.scale(c, 1.5)
            }),
        },
        OpCase {
            name: "max_pool_time_mean",
            leaves: vec![("x", random(&[2, 5, 2, 2, 3], r, -1.0, 1.0))],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| {
                let p = g.max_pool_time(v[0], 2, 2)?;
                let p = g.reshape(p, &[2, 8, 3])?;
                g.mean_axis1(p)
            }),
        },
        OpCase {
            name: "linear_softmax_xent",
            leaves: vec![
                ("x", random(&[3, 4], r, -1.0, 1.0)),
                ("w", random(&[5, 4], r, -1.0, 1.0)),
                ("b", random(&[5], r, -1.0, 1.0)),
            ],
            loss: CheckLoss::Identity,
            build: Box::new(|g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.softmax_xent(y, &[0, 4, 2])
            }),
        },
        OpCase {
            name: "conv1d_time",
            leaves: vec![
                ("x", random(&[6, 3], r, -1.0, 1.0)),
                ("w", random(&[2, 3, 3], r, -1.0, 1.0)),
                ("b", random(&[2], r, -1.0, 1.0)),
            ],
            loss: CheckLoss::SumSquares,
            build: Box::new(|g, v| g.conv1d_time(v[0], v[1], v[2])),
        },
    ]);
    cases
}

/// Finite-difference check of every differentiable op and of the
/// assembled mini network (LCDC and dense variants).
pub fn gradcheck_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for case in op_cases(seed) {
        let tensors: Vec<Tensor> = case.leaves.iter().map(|(_, t)| t.clone()).collect();
        let report = finite_diff_check(&case.build, &tensors, case.loss, eps, None)?;
        for (r, (leaf, _)) in report.iter().zip(&case.leaves) {
            rows.push(GradRow {
                op: case.name.to_string(),
                leaf: leaf.to_string(),
                max_rel_err: r.max_rel_err,
                pass: r.max_rel_err <= tol,
            });
        }
    }
    let lcdc = mini_net_config();
    let dense = NetConfig {
        variant: Variant::Dense,
        groups: 2,
        ..mini_net_config()
    };
    for (name, cfg) in [("network_lcdc", lcdc), ("network_dense", dense)] {
        for (leaf, r) in network_gradcheck(&cfg, seed, eps, 24)? {
            rows.push(GradRow {
                op: name.to_string(),
                leaf,
                max_rel_err: r.max_rel_err,
                pass: r.max_rel_err <= tol,
            });
        }
    }
    Ok(rows)
}
