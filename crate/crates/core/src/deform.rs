//! Deformable convolution and its locally-consistent form (LCDC).
//!
//! A [`DenseOffsets`] field carries one displacement per output location,
//! deformable group and kernel tap, so tap `k` at output `n` samples
//! `n_in + tap(k) + Δ̈[n, g, k]`. A [`LocalOffsets`] field carries one
//! displacement per input location; LCDC ties every tap that reads input
//! position `m` to the same displacement `Δ̇[m]`. That tying makes LCDC a
//! plain convolution of the deformed input `x̃[m] = x(m + Δ̇[m])`, which is
//! how [`lcdc_conv2d`] and [`deform_input`] relate.
//!
//! Displacements are `(row, col)` pairs in feature-grid units. Channel `i`
//! belongs to deformable group `i / (I / G)`.

use serde::{Deserialize, Serialize};

use crate::conv::{apply_patch, apply_patch_backward, check_map, conv2d, in_bounds, Bilinear, KernelSpec};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// One 2-vector per location of a feature map (`H×W×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOffsets {
    field: Tensor,
}

impl LocalOffsets {
    pub fn new(field: Tensor) -> Result<Self> {
        match field.shape() {
            [_, _, 2] => {}
            s => return Err(shape_mismatch("LocalOffsets", &[0, 0, 2], s)),
        }
        Ok(Self {
            field: field.ensure_finite("LocalOffsets")?,
        })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            field: Tensor::zeros(&[h, w, 2]),
        }
    }

    pub fn constant(h: usize, w: usize, v: (f64, f64)) -> Self {
        Self {
            field: Tensor::from_fn(&[h, w, 2], |i| if i[2] == 0 { v.0 } else { v.1 }),
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.field.shape()[0], self.field.shape()[1])
    }

    pub fn at(&self, r: usize, c: usize) -> (f64, f64) {
        let w = self.field.shape()[1];
        let d = self.field.data();
        (d[(r * w + c) * 2], d[(r * w + c) * 2 + 1])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor {
        self.field
    }
}

/// Per-location, per-group, per-tap displacements (`H×W×G×K×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOffsets {
    field: Tensor,
}

impl DenseOffsets {
    pub fn new(field: Tensor) -> Result<Self> {
        match field.shape() {
            [_, _, _, _, 2] => {}
            s => return Err(shape_mismatch("DenseOffsets", &[0, 0, 0, 0, 2], s)),
        }
        Ok(Self {
            field: field.ensure_finite("DenseOffsets")?,
        })
    }

    pub fn zeros(h: usize, w: usize, groups: usize, taps: usize) -> Self {
        Self {
            field: Tensor::zeros(&[h, w, groups, taps, 2]),
        }
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.field.shape()[0], self.field.shape()[1])
    }

    pub fn groups(&self) -> usize {
        self.field.shape()[2]
    }

    pub fn taps(&self) -> usize {
        self.field.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor {
        self.field
    }

    /// Adaptive receptive field: absolute sampling positions
    /// `n_in + tap(k) + Δ̈[n, g, k]` (`H×W×G×K×2`).
    pub fn receptive_field(&self, spec: &KernelSpec) -> Result<Tensor> {
        check_dense(self, spec, self.extents())?;
        let mut out = self.field.clone();
        let (h, w) = self.extents();
        let g = self.groups();
        let k = self.taps();
        let d = out.data_mut();
        for r in 0..h {
            for c in 0..w {
                for gi in 0..g {
                    for a in 0..spec.kh {
                        for b in 0..spec.kw {
                            let (pr, pc) = spec.input_pos(r, c, a, b);
                            let base = ((((r * w + c) * g + gi) * k) + a * spec.kw + b) * 2;
                            d[base] += pr as f64;
                            d[base + 1] += pc as f64;
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// How a [`LocalOffsets`] field is expanded to per-tap form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpandMode {
    /// `Δ̈[n, g, k] = Δ̇[n_in + tap(k)]`, zero outside the field. This is
    /// the local coherency constraint.
    Shifted,
    /// `Δ̈[n, g, k] = Δ̇[n]` for every tap.
    Replicated,
}

fn check_dense(off: &DenseOffsets, spec: &KernelSpec, out: (usize, usize)) -> Result<()> {
    let expected = [out.0, out.1, spec.groups, spec.taps(), 2];
    if off.field.shape() != expected {
        return Err(shape_mismatch("dense offsets", &expected, off.field.shape()));
    }
    Ok(())
}

/// Channels-last frame dimensions used by the raw kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// `x̃[m, i] = x_i(m + Δ̇[m])` for one frame.
pub(crate) fn deform_input_frame(x: &[f64], d: Dims, off: &[f64], out: &mut [f64]) {
    for m in 0..d.h * d.w {
        let (r, c) = (m / d.w, m % d.w);
        let bl = Bilinear::new(d.h, d.w, r as f64 + off[m * 2], c as f64 + off[m * 2 + 1]);
        for i in 0..d.c {
            out[m * d.c + i] = bl.sample(x, d.c, i);
        }
    }
}

pub(crate) fn deform_input_frame_backward(
    x: &[f64],
    d: Dims,
    off: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    doff: &mut [f64],
) {
    for m in 0..d.h * d.w {
        let (r, c) = (m / d.w, m % d.w);
        let bl = Bilinear::new(d.h, d.w, r as f64 + off[m * 2], c as f64 + off[m * 2 + 1]);
        let (mut gr, mut gc) = (0.0, 0.0);
        for i in 0..d.c {
            let g = dy[m * d.c + i];
            if g == 0.0 {
                continue;
            }
            bl.scatter(dx, d.c, i, g);
            let (pr, pc) = bl.point_grad(x, d.c, i);
            gr += g * pr;
            gc += g * pc;
        }
        doff[m * 2] += gr;
        doff[m * 2 + 1] += gc;
    }
}

/// Bilinear samplers of the LCDC taps at output `(y, xo)`; `None` for
/// taps whose anchor lies outside the map.
fn lcdc_taps(d: Dims, off: &[f64], spec: &KernelSpec, y: usize, xo: usize, taps: &mut [Option<(usize, Bilinear)>]) {
    for a in 0..spec.kh {
        for b in 0..spec.kw {
            let pos = spec.input_pos(y, xo, a, b);
            taps[a * spec.kw + b] = in_bounds(pos, d.h, d.w).map(|m| {
                let r = pos.0 as f64 + off[m * 2];
                let c = pos.1 as f64 + off[m * 2 + 1];
                (m, Bilinear::new(d.h, d.w, r, c))
            });
        }
    }
}

fn fill_lcdc_patch(x: &[f64], ci: usize, taps: &[Option<(usize, Bilinear)>], patch: &mut [f64]) {
    for (k, t) in taps.iter().enumerate() {
        let dst = &mut patch[k * ci..][..ci];
        match t {
            Some((_, bl)) => {
                for (i, v) in dst.iter_mut().enumerate() {
                    *v = bl.sample(x, ci, i);
                }
            }
            None => dst.fill(0.0),
        }
    }
}

/// Direct LCDC: every tap reading input position `m` samples at
/// `m + Δ̇[m]`. Positions outside the map contribute zero.
pub(crate) fn lcdc_frame(
    x: &[f64],
    d: Dims,
    off: &[f64],
    spec: &KernelSpec,
    wt: &[f64],
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    let co = spec.out_channels;
    let mut taps = vec![None; spec.taps()];
    let mut patch = vec![0.0; spec.taps() * d.c];
    for y in 0..oh {
        for xo in 0..ow {
            lcdc_taps(d, off, spec, y, xo, &mut taps);
            fill_lcdc_patch(x, d.c, &taps, &mut patch);
            apply_patch(wt, &patch, &mut out[(y * ow + xo) * co..][..co]);
        }
    }
}

pub(crate) struct FrameGrads<'a> {
    pub dx: &'a mut [f64],
    pub doff: &'a mut [f64],
    pub dw: &'a mut [f64],
}

/// Pushes a sample gradient through the sampler: into the map and into
/// the sampling point. Returns the point gradient.
#[inline]
fn sample_backward(x: &[f64], ci: usize, bl: &Bilinear, c0: usize, gin: &[f64], dx: &mut [f64]) -> (f64, f64) {
    let (mut gr, mut gc) = (0.0, 0.0);
    for (i, &gi) in (c0..).zip(gin) {
        if gi != 0.0 {
            bl.scatter(dx, ci, i, gi);
            let (pr, pc) = bl.point_grad(x, ci, i);
            gr += gi * pr;
            gc += gi * pc;
        }
    }
    (gr, gc)
}

pub(crate) fn lcdc_frame_backward(
    x: &[f64],
    d: Dims,
    off: &[f64],
    spec: &KernelSpec,
    wt: &[f64],
    dy: &[f64],
    oh: usize,
    ow: usize,
    grads: FrameGrads<'_>,
) {
    let ci = d.c;
    let co = spec.out_channels;
    let len = spec.taps() * ci;
    let mut taps = vec![None; spec.taps()];
    let (mut patch, mut gpatch) = (vec![0.0; len], vec![0.0; len]);
    for y in 0..oh {
        for xo in 0..ow {
            let g = &dy[(y * ow + xo) * co..][..co];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            lcdc_taps(d, off, spec, y, xo, &mut taps);
            fill_lcdc_patch(x, ci, &taps, &mut patch);
            apply_patch_backward(wt, &patch, g, &mut gpatch, Some(&mut *grads.dw));
            for (k, t) in taps.iter().enumerate() {
                if let Some((m, bl)) = t {
                    let (gr, gc) = sample_backward(x, ci, bl, 0, &gpatch[k * ci..][..ci], grads.dx);
                    grads.doff[m * 2] += gr;
                    grads.doff[m * 2 + 1] += gc;
                }
            }
        }
    }
}

/// Samplers for every (tap, group) of output location `n`.
fn dense_taps(d: Dims, off: &[f64], spec: &KernelSpec, y: usize, xo: usize, n: usize, taps: &mut [Bilinear]) {
    let g = spec.groups;
    let k = spec.taps();
    for a in 0..spec.kh {
        for b in 0..spec.kw {
            let tap = a * spec.kw + b;
            let pos = spec.input_pos(y, xo, a, b);
            for gi in 0..g {
                let o = ((n * g + gi) * k + tap) * 2;
                taps[tap * g + gi] = Bilinear::new(d.h, d.w, pos.0 as f64 + off[o], pos.1 as f64 + off[o + 1]);
            }
        }
    }
}

fn fill_dense_patch(x: &[f64], ci: usize, groups: usize, taps: &[Bilinear], patch: &mut [f64]) {
    let per_group = ci / groups;
    for (q, bl) in taps.iter().enumerate() {
        let (tap, gi) = (q / groups, q % groups);
        for i in gi * per_group..(gi + 1) * per_group {
            patch[tap * ci + i] = bl.sample(x, ci, i);
        }
    }
}

/// Deformable convolution for one frame with dense offsets laid out
/// `oh×ow×G×K×2`.
pub(crate) fn deform_frame(
    x: &[f64],
    d: Dims,
    off: &[f64],
    spec: &KernelSpec,
    wt: &[f64],
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    let co = spec.out_channels;
    let dummy = Bilinear::new(1, 1, 0.0, 0.0);
    let mut taps = vec![dummy; spec.taps() * spec.groups];
    let mut patch = vec![0.0; spec.taps() * d.c];
    for y in 0..oh {
        for xo in 0..ow {
            let n = y * ow + xo;
            dense_taps(d, off, spec, y, xo, n, &mut taps);
            fill_dense_patch(x, d.c, spec.groups, &taps, &mut patch);
            apply_patch(wt, &patch, &mut out[n * co..][..co]);
        }
    }
}

pub(crate) fn deform_frame_backward(
    x: &[f64],
    d: Dims,
    off: &[f64],
    spec: &KernelSpec,
    wt: &[f64],
    dy: &[f64],
    oh: usize,
    ow: usize,
    grads: FrameGrads<'_>,
) {
    let ci = d.c;
    let g = spec.groups;
    let per_group = ci / g;
    let k = spec.taps();
    let co = spec.out_channels;
    let len = k * ci;
    let dummy = Bilinear::new(1, 1, 0.0, 0.0);
    let mut taps = vec![dummy; k * g];
    let (mut patch, mut gpatch) = (vec![0.0; len], vec![0.0; len]);
    for y in 0..oh {
        for xo in 0..ow {
            let n = y * ow + xo;
            let gy = &dy[n * co..][..co];
            if gy.iter().all(|&v| v == 0.0) {
                continue;
            }
            dense_taps(d, off, spec, y, xo, n, &mut taps);
            fill_dense_patch(x, ci, g, &taps, &mut patch);
            apply_patch_backward(wt, &patch, gy, &mut gpatch, Some(&mut *grads.dw));
            for (q, bl) in taps.iter().enumerate() {
                let (tap, gi) = (q / g, q % g);
                let lo = tap * ci + gi * per_group;
                let (gr, gc) = sample_backward(x, ci, bl, gi * per_group, &gpatch[lo..lo + per_group], grads.dx);
                let o = ((n * g + gi) * k + tap) * 2;
                grads.doff[o] += gr;
                grads.doff[o + 1] += gc;
            }
        }
    }
}

/// Expansion of a local field (`lh×lw×2`) into dense form (`oh×ow×G×K×2`).
/// Each dense entry copies one local entry or is zero, so the map is a
/// gather; the backward pass is the matching scatter.
pub(crate) fn expand_index(
    spec: &KernelSpec,
    mode: ExpandMode,
    local: (usize, usize),
    out: (usize, usize),
) -> Vec<Option<usize>> {
    let (oh, ow) = out;
    let k = spec.taps();
    let mut idx = Vec::with_capacity(oh * ow * spec.groups * k);
    for y in 0..oh {
        for xo in 0..ow {
            for _ in 0..spec.groups {
                for a in 0..spec.kh {
                    for b in 0..spec.kw {
                        idx.push(match mode {
                            ExpandMode::Shifted => {
                                in_bounds(spec.input_pos(y, xo, a, b), local.0, local.1)
                            }
                            ExpandMode::Replicated => Some(y * ow + xo),
                        });
                    }
                }
            }
        }
    }
    idx
}

/// Deformable convolution with per-tap, per-group offsets.
pub fn deformable_conv2d(
    x: &Tensor,
    w: &Tensor,
    offsets: &DenseOffsets,
    spec: &KernelSpec,
) -> Result<Tensor> {
    let (h, wd, oh, ow) = check_map("deformable_conv2d", x, w, spec)?;
    if offsets.groups() != spec.groups {
        return Err(Error::InvalidKernel(format!(
            "offsets carry {} groups but spec has {}",
            offsets.groups(),
            spec.groups
        )));
    }
    check_dense(offsets, spec, (oh, ow))?;
    let mut out = vec![0.0; oh * ow * spec.out_channels];
    let d = Dims {
        h,
        w: wd,
        c: spec.in_channels,
    };
    deform_frame(
        x.data(),
        d,
        offsets.field.data(),
        spec,
        w.data(),
        &mut out,
        oh,
        ow,
    );
    Tensor::new(vec![oh, ow, spec.out_channels], out)?.ensure_finite("deformable_conv2d")
}

/// LCDC computed directly: each tap samples `x` at
/// `n_in + tap(k) + Δ̇[n_in + tap(k)]`.
pub fn lcdc_conv2d(
    x: &Tensor,
    w: &Tensor,
    offsets: &LocalOffsets,
    spec: &KernelSpec,
) -> Result<Tensor> {
    let (h, wd, oh, ow) = check_map("lcdc_conv2d", x, w, spec)?;
    if offsets.extents() != (h, wd) {
        return Err(shape_mismatch(
            "lcdc_conv2d offsets",
            &[h, wd, 2],
            offsets.field.shape(),
        ));
    }
    let mut out = vec![0.0; oh * ow * spec.out_channels];
    let d = Dims {
        h,
        w: wd,
        c: spec.in_channels,
    };
    lcdc_frame(
        x.data(),
        d,
        offsets.field.data(),
        spec,
        w.data(),
        &mut out,
        oh,
        ow,
    );
    Tensor::new(vec![oh, ow, spec.out_channels], out)?.ensure_finite("lcdc_conv2d")
}

/// Resamples every channel of `x` at `m + Δ̇[m]`.
pub fn deform_input(x: &Tensor, offsets: &LocalOffsets) -> Result<Tensor> {
    let &[h, w, c] = x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "deform_input expects an HxWxC map, got {:?}",
            x.shape()
        )));
    };
    if offsets.extents() != (h, w) {
        return Err(shape_mismatch(
            "deform_input offsets",
            &[h, w, 2],
            offsets.field.shape(),
        ));
    }
    let mut out = vec![0.0; h * w * c];
    deform_input_frame(x.data(), Dims { h, w, c }, offsets.field.data(), &mut out);
    Tensor::new(vec![h, w, c], out)?.ensure_finite("deform_input")
}

/// Expands `Δ̇` into per-tap offsets for `spec`.
///
/// In [`ExpandMode::Shifted`] the field lives on the input grid of `spec`
/// and the result on its output grid; in [`ExpandMode::Replicated`] the
/// field already lives on the output grid. For stride 1 with "same" padding
/// both grids coincide.
pub fn expand_local_to_dense(
    offsets: &LocalOffsets,
    spec: &KernelSpec,
    mode: ExpandMode,
) -> Result<DenseOffsets> {
    spec.validate()?;
    let src = offsets.extents();
    let (oh, ow) = match mode {
        ExpandMode::Shifted => spec.output_extents(src.0, src.1)?,
        ExpandMode::Replicated => src,
    };
    let idx = expand_index(spec, mode, src, (oh, ow));
    let local = offsets.field.data();
    let mut data = vec![0.0; idx.len() * 2];
    for (slot, m) in idx.iter().enumerate() {
        if let Some(m) = *m {
            data[slot * 2] = local[m * 2];
            data[slot * 2 + 1] = local[m * 2 + 1];
        }
    }
    DenseOffsets::new(Tensor::new(vec![oh, ow, spec.groups, spec.taps(), 2], data)?)
}

/// `Δ̇ = Φ ∗ x`. The learner must emit two channels and preserve the spatial
/// extents of `x`.
pub fn offset_learner(x: &Tensor, phi: &Tensor, spec: &KernelSpec) -> Result<LocalOffsets> {
    if spec.out_channels != 2 {
        return Err(Error::OffsetChannels {
            expected: 2,
            actual: spec.out_channels,
        });
    }
    let y = conv2d(x, phi, spec)?;
    if y.shape()[..2] != x.shape()[..2] {
        return Err(shape_mismatch("offset_learner", &x.shape()[..2], &y.shape()[..2]));
    }
    LocalOffsets::new(y)
}

/// `Δ̈_k = h_k ∗ x` for every group and tap of the `target` deformable
/// convolution; the learner emits `G·K·2` channels ordered `(g, k, row|col)`.
pub fn dense_offset_learner(
    x: &Tensor,
    h: &Tensor,
    spec: &KernelSpec,
    target: &KernelSpec,
) -> Result<DenseOffsets> {
    let expected = target.groups * target.taps() * 2;
    if spec.out_channels != expected {
        return Err(Error::OffsetChannels {
            expected,
            actual: spec.out_channels,
        });
    }
    let y = conv2d(x, h, spec)?;
    let (oh, ow) = (y.shape()[0], y.shape()[1]);
    DenseOffsets::new(y.into_reshape(&[oh, ow, target.groups, target.taps(), 2])?)
}
