//! Bilinear sampling and plain 2D/3D convolution on channels-last tensors.
//!
//! Feature maps are `H×W×C` (row, column, channel). Kernels are stored in
//! tap order as `O×kh×kw×I`, and convolution is implemented as
//! cross-correlation: the tap at kernel slot `(a, b)` multiplies the input at
//! `(row·stride − padding + a·dilation, col·stride − padding + b·dilation)`.
//! The reflected-kernel convention `w[−k]·x[n+k]` is absorbed by this storage
//! order. Out-of-range input positions read as zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    /// Deformable groups; only the deformable variants read this.
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl KernelSpec {
    /// Stride 1, dilation 1, no padding, one group.
    pub fn new(kh: usize, kw: usize, in_channels: usize, out_channels: usize) -> Self {
        Self {
            kh,
            kw,
            stride: 1,
            dilation: 1,
            padding: 0,
            groups: 1,
            in_channels,
            out_channels,
        }
    }

    /// Square kernel with "same" padding for odd sizes.
    pub fn same(k: usize, in_channels: usize, out_channels: usize) -> Self {
        Self::new(k, k, in_channels, out_channels).with_padding((k - 1) / 2)
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    /// Number of kernel taps `K = kh·kw`.
    pub fn taps(&self) -> usize {
        self.kh * self.kw
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.kh, self.kw, self.in_channels]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidKernel(m));
        if self.kh == 0 || self.kw == 0 {
            return bad(format!("empty kernel {}x{}", self.kh, self.kw));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return bad("stride, dilation and groups must be positive".into());
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.in_channels % self.groups != 0 {
            return bad(format!(
                "in_channels {} not divisible by groups {}",
                self.in_channels, self.groups
            ));
        }
        Ok(())
    }

    fn out_extent(&self, input: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = input + 2 * self.padding;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    /// Output spatial extents for an `h×w` input.
    pub fn output_extents(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        match (self.out_extent(h, self.kh), self.out_extent(w, self.kw)) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::InvalidKernel(format!(
                "kernel {}x{} (dilation {}, padding {}) does not fit a {h}x{w} input",
                self.kh, self.kw, self.dilation, self.padding
            ))),
        }
    }

    /// Offset of tap `(a, b)` from the output anchor. Odd extents are
    /// centered, even extents are anchored at the top-left tap.
    pub fn tap_offset(&self, a: usize, b: usize) -> (isize, isize) {
        let d = self.dilation as isize;
        let (cr, cc) = self.center();
        (a as isize * d - cr, b as isize * d - cc)
    }

    fn center(&self) -> (isize, isize) {
        let d = self.dilation as isize;
        let c = |k: usize| if k % 2 == 1 { (k as isize - 1) / 2 * d } else { 0 };
        (c(self.kh), c(self.kw))
    }

    /// Input-grid anchor of output location `(oh, ow)`.
    pub fn anchor(&self, oh: usize, ow: usize) -> (isize, isize) {
        let (cr, cc) = self.center();
        let s = self.stride as isize;
        let p = self.padding as isize;
        (oh as isize * s - p + cr, ow as isize * s - p + cc)
    }

    /// Input position read by tap `(a, b)` at output `(oh, ow)`.
    #[inline]
    pub fn input_pos(&self, oh: usize, ow: usize, a: usize, b: usize) -> (isize, isize) {
        let s = self.stride as isize;
        let p = self.padding as isize;
        let d = self.dilation as isize;
        (
            oh as isize * s - p + a as isize * d,
            ow as isize * s - p + b as isize * d,
        )
    }

    /// `(k, tap_row, tap_col)` for every tap in storage order.
    pub fn tap_table(&self) -> Vec<(usize, isize, isize)> {
        (0..self.kh)
            .flat_map(|a| (0..self.kw).map(move |b| (a, b)))
            .enumerate()
            .map(|(k, (a, b))| {
                let (r, c) = self.tap_offset(a, b);
                (k, r, c)
            })
            .collect()
    }
}

/// Spec of a 3D convolution: temporal extent and stride (valid, unpadded in
/// time) on top of a spatial [`KernelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3dSpec {
    pub kt: usize,
    pub t_stride: usize,
    pub spatial: KernelSpec,
}

impl Conv3dSpec {
    pub fn weight_shape(&self) -> [usize; 5] {
        let s = &self.spatial;
        [s.out_channels, self.kt, s.kh, s.kw, s.in_channels]
    }

    pub fn output_time(&self, t: usize) -> Result<usize> {
        if self.kt == 0 || self.t_stride == 0 {
            return Err(Error::InvalidKernel("temporal kernel and stride must be positive".into()));
        }
        if t < self.kt {
            return Err(Error::SnippetTooShort {
                extent: t,
                kernel: self.kt,
            });
        }
        Ok((t - self.kt) / self.t_stride + 1)
    }
}

/// Corner indices and weights of one bilinear sample.
///
/// Corners are ordered `(r0,c0), (r0,c0+1), (r0+1,c0), (r0+1,c0+1)`; corners
/// outside the plane carry `None` and contribute zero.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Bilinear {
    pub idx: [Option<usize>; 4],
    pub wt: [f64; 4],
    pub fr: f64,
    pub fc: f64,
}

impl Bilinear {
    #[inline]
    pub fn new(h: usize, w: usize, r: f64, c: f64) -> Self {
        let r0f = r.floor();
        let c0f = c.floor();
        let fr = r - r0f;
        let fc = c - c0f;
        let r0 = r0f as isize;
        let c0 = c0f as isize;
        let at = |y: isize, x: isize| {
            (y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w)
                .then(|| y as usize * w + x as usize)
        };
        Self {
            idx: [at(r0, c0), at(r0, c0 + 1), at(r0 + 1, c0), at(r0 + 1, c0 + 1)],
            wt: [
                (1.0 - fr) * (1.0 - fc),
                (1.0 - fr) * fc,
                fr * (1.0 - fc),
                fr * fc,
            ],
            fr,
            fc,
        }
    }

    /// Samples channel `ch` of a channels-last plane with `stride` channels.
    #[inline]
    pub fn sample(&self, data: &[f64], stride: usize, ch: usize) -> f64 {
        let v = |k: usize| self.idx[k].map_or(0.0, |p| data[p * stride + ch]);
        v(0) * self.wt[0] + v(1) * self.wt[1] + v(2) * self.wt[2] + v(3) * self.wt[3]
    }

    /// Derivative of the sample with respect to the (row, col) sampling point,
    /// taken on the patch to the lower right of the point.
    #[inline]
    pub fn point_grad(&self, data: &[f64], stride: usize, ch: usize) -> (f64, f64) {
        let v = |k: usize| self.idx[k].map_or(0.0, |p| data[p * stride + ch]);
        let (v00, v01, v10, v11) = (v(0), v(1), v(2), v(3));
        (
            (1.0 - self.fc) * (v10 - v00) + self.fc * (v11 - v01),
            (1.0 - self.fr) * (v01 - v00) + self.fr * (v11 - v10),
        )
    }

    /// Scatters `g` times the corner weights into a plane gradient.
    #[inline]
    pub fn scatter(&self, grad: &mut [f64], stride: usize, ch: usize, g: f64) {
        for k in 0..4 {
            if let Some(p) = self.idx[k] {
                grad[p * stride + ch] += g * self.wt[k];
            }
        }
    }
}

/// Bilinear interpolation of a single-channel `H×W` plane at `(row, col)`.
///
/// Lattice points outside the plane read as zero; integer points return the
/// stored value exactly.
pub fn bilinear_sample(plane: &Tensor, p: (f64, f64)) -> Result<f64> {
    if !p.0.is_finite() || !p.1.is_finite() {
        return Err(Error::InvalidSamplePoint(p.0, p.1));
    }
    let (h, w) = plane2(plane)?;
    Ok(Bilinear::new(h, w, p.0, p.1).sample(plane.data(), 1, 0))
}

/// Gradient of [`bilinear_sample`] with respect to the sampling point.
pub fn bilinear_point_grad(plane: &Tensor, p: (f64, f64)) -> Result<(f64, f64)> {
    if !p.0.is_finite() || !p.1.is_finite() {
        return Err(Error::InvalidSamplePoint(p.0, p.1));
    }
    let (h, w) = plane2(plane)?;
    Ok(Bilinear::new(h, w, p.0, p.1).point_grad(plane.data(), 1, 0))
}

fn plane2(plane: &Tensor) -> Result<(usize, usize)> {
    match plane.shape() {
        &[h, w] => Ok((h, w)),
        s => Err(Error::InvalidArgument(format!(
            "expected a 2D plane, got shape {s:?}"
        ))),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for q in 0..chunks {
        let i = q * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn in_bounds(pos: (isize, isize), h: usize, w: usize) -> Option<usize> {
    (pos.0 >= 0 && pos.1 >= 0 && (pos.0 as usize) < h && (pos.1 as usize) < w)
        .then(|| pos.0 as usize * w + pos.1 as usize)
}

/// Checks a channels-last feature map against the spec and returns
/// `(h, w, out_h, out_w)`.
pub(crate) fn check_map(
    op: &'static str,
    x: &Tensor,
    wt: &Tensor,
    spec: &KernelSpec,
) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let &[h, w, c] = x.shape() else {
        return Err(shape_mismatch(op, &[0, 0, spec.in_channels], x.shape()));
    };
    if c != spec.in_channels {
        return Err(shape_mismatch(op, &[h, w, spec.in_channels], x.shape()));
    }
    if wt.shape() != spec.weight_shape() {
        return Err(shape_mismatch(op, &spec.weight_shape(), wt.shape()));
    }
    let (oh, ow) = spec.output_extents(h, w)?;
    Ok((h, w, oh, ow))
}

/// `y += a·x`.
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Copies the receptive field of output `(y, xo)` into `patch` in kernel
/// order (`kh×kw×I`); taps outside the map read zero.
#[inline]
pub(crate) fn gather_patch(x: &[f64], h: usize, w: usize, spec: &KernelSpec, y: usize, xo: usize, patch: &mut [f64]) {
    let ci = spec.in_channels;
    for a in 0..spec.kh {
        for b in 0..spec.kw {
            let dst = &mut patch[(a * spec.kw + b) * ci..][..ci];
            match in_bounds(spec.input_pos(y, xo, a, b), h, w) {
                Some(p) => dst.copy_from_slice(&x[p * ci..][..ci]),
                None => dst.fill(0.0),
            }
        }
    }
}

/// `out[j] = ⟨w_j, patch⟩` for every output channel.
#[inline]
pub(crate) fn apply_patch(wt: &[f64], patch: &[f64], out: &mut [f64]) {
    let len = patch.len();
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(&wt[j * len..][..len], patch);
    }
}

/// Backward through [`apply_patch`]: `dw_j += g_j·patch` and
/// `gpatch = Σ_j g_j·w_j`. Zero gradients are skipped.
#[inline]
pub(crate) fn apply_patch_backward(
    wt: &[f64],
    patch: &[f64],
    g: &[f64],
    gpatch: &mut [f64],
    dw: Option<&mut [f64]>,
) {
    let len = patch.len();
    gpatch.fill(0.0);
    for (j, &gj) in g.iter().enumerate() {
        if gj != 0.0 {
            axpy(gj, &wt[j * len..][..len], gpatch);
        }
    }
    if let Some(dw) = dw {
        for (j, &gj) in g.iter().enumerate() {
            if gj != 0.0 {
                axpy(gj, patch, &mut dw[j * len..][..len]);
            }
        }
    }
}

/// One-frame convolution kernel over raw channels-last slices.
pub(crate) fn conv2d_frame(
    x: &[f64],
    h: usize,
    w: usize,
    spec: &KernelSpec,
    wt: &[f64],
    out: &mut [f64],
    oh: usize,
    ow: usize,
) {
    let co = spec.out_channels;
    let mut patch = vec![0.0; spec.taps() * spec.in_channels];
    for y in 0..oh {
        for xo in 0..ow {
            gather_patch(x, h, w, spec, y, xo, &mut patch);
            apply_patch(wt, &patch, &mut out[(y * ow + xo) * co..][..co]);
        }
    }
}

/// Backward of [`conv2d_frame`]: accumulates into `dx` and `dw`.
pub(crate) fn conv2d_frame_backward(
    x: &[f64],
    h: usize,
    w: usize,
    spec: &KernelSpec,
    wt: &[f64],
    dy: &[f64],
    oh: usize,
    ow: usize,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let ci = spec.in_channels;
    let co = spec.out_channels;
    let len = spec.taps() * ci;
    let mut patch = vec![0.0; len];
    let mut gpatch = vec![0.0; len];
    for y in 0..oh {
        for xo in 0..ow {
            let g = &dy[(y * ow + xo) * co..][..co];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            if dw.is_some() {
                gather_patch(x, h, w, spec, y, xo, &mut patch);
            }
            apply_patch_backward(wt, &patch, g, &mut gpatch, dw.as_deref_mut());
            let Some(dx) = dx.as_deref_mut() else {
                continue;
            };
            for a in 0..spec.kh {
                for b in 0..spec.kw {
                    if let Some(p) = in_bounds(spec.input_pos(y, xo, a, b), h, w) {
                        let src = &gpatch[(a * spec.kw + b) * ci..][..ci];
                        for (d, &v) in dx[p * ci..][..ci].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an `H×W×I` map with an `O×kh×kw×I` kernel.
pub fn conv2d(x: &Tensor, w: &Tensor, spec: &KernelSpec) -> Result<Tensor> {
    let (h, wd, oh, ow) = check_map("conv2d", x, w, spec)?;
    let mut out = vec![0.0; oh * ow * spec.out_channels];
    conv2d_frame(x.data(), h, wd, spec, w.data(), &mut out, oh, ow);
    Tensor::new(vec![oh, ow, spec.out_channels], out)?.ensure_finite("conv2d")
}

/// Batched forward over `n` frames stored back to back; frames are
/// independent, so the result does not depend on the thread count.
pub(crate) fn conv2d_batch(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    spec: &KernelSpec,
    wt: &[f64],
) -> Result<(Vec<f64>, usize, usize)> {
    let (oh, ow) = spec.output_extents(h, w)?;
    let in_sz = h * w * spec.in_channels;
    let out_sz = oh * ow * spec.out_channels;
    let mut out = vec![0.0; n * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(o, xf)| conv2d_frame(xf, h, w, spec, wt, o, oh, ow));
    Ok((out, oh, ow))
}

fn check_3d(x: &Tensor, wt: &Tensor, spec: &Conv3dSpec) -> Result<[usize; 4]> {
    spec.spatial.validate()?;
    let &[t, h, w, c] = x.shape() else {
        return Err(shape_mismatch("conv3d", &[0, 0, 0, spec.spatial.in_channels], x.shape()));
    };
    if c != spec.spatial.in_channels {
        return Err(shape_mismatch("conv3d", &[t, h, w, spec.spatial.in_channels], x.shape()));
    }
    if wt.shape() != spec.weight_shape() {
        return Err(shape_mismatch("conv3d", &spec.weight_shape(), wt.shape()));
    }
    Ok([t, h, w, c])
}

fn gather_clip_patch(x: &[f64], t: [usize; 3], spec: &Conv3dSpec, to: usize, y: usize, xo: usize, patch: &mut [f64]) {
    let [_, h, w] = t;
    let s = &spec.spatial;
    let frame = h * w * s.in_channels;
    let plen = s.taps() * s.in_channels;
    for dt in 0..spec.kt {
        let ti = to * spec.t_stride + dt;
        gather_patch(&x[ti * frame..][..frame], h, w, s, y, xo, &mut patch[dt * plen..][..plen]);
    }
}

/// One-snippet 3D convolution: valid in time, zero-padded in space.
pub(crate) fn conv3d_clip(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    spec: &Conv3dSpec,
    wt: &[f64],
    out: &mut [f64],
) -> Result<(usize, usize, usize)> {
    let s = &spec.spatial;
    let ot = spec.output_time(t)?;
    let (oh, ow) = s.output_extents(h, w)?;
    let co = s.out_channels;
    let mut patch = vec![0.0; spec.kt * s.taps() * s.in_channels];
    for to in 0..ot {
        for y in 0..oh {
            for xo in 0..ow {
                gather_clip_patch(x, [t, h, w], spec, to, y, xo, &mut patch);
                apply_patch(wt, &patch, &mut out[((to * oh + y) * ow + xo) * co..][..co]);
            }
        }
    }
    Ok((ot, oh, ow))
}

pub(crate) fn conv3d_clip_backward(
    x: &[f64],
    t: usize,
    h: usize,
    w: usize,
    spec: &Conv3dSpec,
    wt: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dw: &mut [f64],
) -> Result<()> {
    let s = &spec.spatial;
    let ot = spec.output_time(t)?;
    let (oh, ow) = s.output_extents(h, w)?;
    let ci = s.in_channels;
    let co = s.out_channels;
    let frame = h * w * ci;
    let len = spec.kt * s.taps() * ci;
    let (mut patch, mut gpatch) = (vec![0.0; len], vec![0.0; len]);
    for to in 0..ot {
        for y in 0..oh {
            for xo in 0..ow {
                let g = &dy[((to * oh + y) * ow + xo) * co..][..co];
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                gather_clip_patch(x, [t, h, w], spec, to, y, xo, &mut patch);
                apply_patch_backward(wt, &patch, g, &mut gpatch, Some(&mut *dw));
                for dt in 0..spec.kt {
                    let ti = to * spec.t_stride + dt;
                    for a in 0..s.kh {
                        for b in 0..s.kw {
                            if let Some(p) = in_bounds(s.input_pos(y, xo, a, b), h, w) {
                                let src = &gpatch[((dt * s.kh + a) * s.kw + b) * ci..][..ci];
                                for (d, &v) in dx[ti * frame + p * ci..][..ci].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// 3D convolution of a `T×H×W×I` snippet with an `O×kt×kh×kw×I` kernel.
pub fn conv3d(x: &Tensor, w: &Tensor, spec: &Conv3dSpec) -> Result<Tensor> {
    let [t, h, wd, _] = check_3d(x, w, spec)?;
    let ot = spec.output_time(t)?;
    let (oh, ow) = spec.spatial.output_extents(h, wd)?;
    let co = spec.spatial.out_channels;
    let mut out = vec![0.0; ot * oh * ow * co];
    conv3d_clip(x.data(), t, h, wd, spec, w.data(), &mut out)?;
    Tensor::new(vec![ot, oh, ow, co], out)?.ensure_finite("conv3d")
}
