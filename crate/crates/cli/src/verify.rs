//! Verification subcommands: each prints its report and returns whether
//! every check passed.

use anyhow::{bail, Result};
use lcdc::deform::LocalOffsets;
use lcdc::motion::{check_proposition1, compare_lcdc_outputs, multilinear_image, MotionField};
use lcdc::network::{offset_learner_params, param_count, temporal_table, Variant};
use lcdc::rng::{hash_seed, XorShift64};
use lcdc::suites::{degeneracy_suite, equivalence_suite, gradcheck_suite};
use lcdc::{KernelSpec, Tensor};

use crate::{read_train_config, EquivArgs, GradcheckArgs, ParamsArgs, Prop1Args, TapsArgs};

fn status(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let rows = gradcheck_suite(a.seed, a.eps, a.tol)?;
    println!("op,leaf,max_rel_err,status");
    for r in &rows {
        println!("{},{},{:e},{}", r.op, r.leaf, r.max_rel_err, status(r.pass));
    }
    let ok = rows.iter().all(|r| r.pass);
    eprintln!("{} of {} gradient checks passed", rows.iter().filter(|r| r.pass).count(), rows.len());
    Ok(ok)
}

pub fn prop1(a: &Prop1Args) -> Result<bool> {
    let (h, w) = a.grid;
    if a.in_channels == 0 || a.out_channels == 0 || a.kernel == 0 || a.dilation == 0 {
        bail!("kernel size, dilation and channel counts must be positive");
    }
    let mut rng = XorShift64::new(hash_seed(&[a.seed, 0x9801]));
    let coeffs: Vec<[f64; 4]> = (0..a.in_channels)
        .map(|_| {
            [
                rng.range(-1.0, 1.0),
                rng.range(-0.5, 0.5),
                rng.range(-0.5, 0.5),
                rng.range(-0.1, 0.1),
            ]
        })
        .collect();
    let x = multilinear_image(h, w, &coeffs);
    let spec = KernelSpec::same(a.kernel, a.in_channels, a.out_channels)
        .with_dilation(a.dilation)
        .with_padding(a.dilation * (a.kernel - 1) / 2);
    let wt = Tensor::from_fn(&spec.weight_shape(), |_| rng.range(-1.0, 1.0));
    let prev = LocalOffsets::new(Tensor::from_fn(&[h, w, 2], |_| rng.range(-0.5, 0.5)))?;
    let o = MotionField::constant(h, w, a.translation);
    let r = if a.violate {
        compare_lcdc_outputs(&x, &o, &prev, &prev, &wt, &spec, a.tol)?
    } else {
        check_proposition1(&x, &o, &prev, &wt, &spec, a.tol)?
    };
    println!("max_output_gap={:e}", r.max_output_gap);
    println!("max_motion_gap={:e}", r.max_motion_gap);
    println!("compared={}", r.compared);
    println!("{}", status(r.pass));
    Ok(r.pass)
}

pub fn params(a: &ParamsArgs) -> Result<bool> {
    let mut net = read_train_config(a.config.as_ref())?.net;
    let kh = a.kh.unwrap_or(net.block_kernel);
    let kw = a.kw.unwrap_or(net.block_kernel);
    if let Some(g) = a.groups {
        net.groups = g;
    }
    if let Some(c) = a.channels {
        match net.trunk_widths.last_mut() {
            Some(last) => *last = c,
            None => bail!("the configuration has no trunk"),
        }
    }
    if let Some(b) = a.blocks {
        net.blocks = b;
    }
    let c = net.feature_channels();
    if kh == 0 || kw == 0 || net.groups == 0 || c == 0 || net.blocks == 0 {
        bail!("kernel extents, groups, channels and blocks must be positive");
    }
    let local = net.blocks * offset_learner_params(kh, kw, c, None);
    let dense = net.blocks * offset_learner_params(kh, kw, c, Some(net.groups));
    println!("kh={kh}");
    println!("kw={kw}");
    println!("groups={}", net.groups);
    println!("channels={c}");
    println!("blocks={}", net.blocks);
    if kh == kw {
        net.block_kernel = kh;
        let l = param_count(&net, Variant::Lcdc)?;
        let d = param_count(&net, Variant::Dense)?;
        println!("lcdc_total={}", l.total);
        println!("dense_total={}", d.total);
    }
    println!("lcdc_offset_params={local}");
    println!("dense_offset_params={dense}");
    if dense % local == 0 {
        println!("ratio={}", dense / local);
    } else {
        println!("ratio={}", dense as f64 / local as f64);
    }
    let closed = net.groups * kh * kw;
    println!("closed_form={closed}");
    Ok(dense == closed * local)
}

pub fn equiv(a: &EquivArgs) -> Result<bool> {
    let mut rows = equivalence_suite(a.instances, a.seed)?;
    rows.extend(degeneracy_suite(a.frames, a.seed)?);
    println!("check,instances,max_err,tol,status");
    for r in &rows {
        println!("{},{},{:e},{:e},{}", r.check, r.instances, r.max_err, r.tol, status(r.pass));
    }
    Ok(rows.iter().all(|r| r.pass))
}

pub fn taps(a: &TapsArgs) -> Result<bool> {
    if a.kh == 0 || a.kw == 0 || a.dilation == 0 || a.stride == 0 {
        bail!("kernel extents, dilation and stride must be positive");
    }
    let pad = a.padding.unwrap_or(a.dilation * (a.kh.max(a.kw) - 1) / 2);
    let spec = KernelSpec::new(a.kh, a.kw, 1, 1)
        .with_dilation(a.dilation)
        .with_stride(a.stride)
        .with_padding(pad);
    spec.validate()?;
    println!("k,row,col");
    for (k, r, c) in spec.tap_table() {
        println!("{k},{r},{c}");
    }
    let net = read_train_config(a.config.as_ref())?.net;
    let steps = a.steps.unwrap_or(net.t.saturating_sub(1));
    let rows = temporal_table(steps, &net.fusion);
    println!();
    println!("stage,op,input,output");
    for r in &rows {
        println!("{r}");
    }
    let ok = rows.last().is_some_and(|r| r.output > 0) && rows.len() == 2 * net.fusion.len();
    if !ok {
        eprintln!("fusion stages do not fit {steps} time steps");
    }
    Ok(ok)
}
