//! Reverse-mode differentiation over the convolution, deformation and
//! network operations.
//!
//! A [`Graph`] evaluates eagerly: every builder method computes its value
//! immediately and records enough context to run the transpose later.
//! Nodes are stored in creation order, which is a topological order.
//! [`Graph::backward`] walks them in reverse and accumulates gradients
//! additively where a value fans out.
//!
//! Batched layouts are channels-last with a leading batch axis: 2D maps are
//! `N×H×W×C`, snippets are `N×T×H×W×C`, offset fields are `N×H×W×2` (local)
//! or `N×H×W×G×K×2` (dense), and dense layers take `N×F`.

mod gradcheck;

pub use gradcheck::{finite_diff_check, CheckLoss, LeafCheck};

use rayon::prelude::*;

use crate::conv::{
    conv2d_batch, conv2d_frame_backward, conv3d_clip, conv3d_clip_backward, Bilinear, Conv3dSpec,
    KernelSpec,
};
use crate::deform::{
    deform_frame, deform_frame_backward, deform_input_frame, deform_input_frame_backward,
    expand_index, lcdc_frame, lcdc_frame_backward, Dims, ExpandMode, FrameGrads,
};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        spec: KernelSpec,
    },
    Conv3d {
        x: Var,
        w: Var,
        spec: Conv3dSpec,
    },
    BiasAdd {
        x: Var,
        b: Var,
    },
    DeformInput {
        x: Var,
        off: Var,
    },
    Lcdc {
        x: Var,
        w: Var,
        off: Var,
        spec: KernelSpec,
    },
    DeformConv {
        x: Var,
        w: Var,
        off: Var,
        spec: KernelSpec,
    },
    Expand {
        off: Var,
        idx: Vec<Option<usize>>,
    },
    Sample {
        plane: Var,
        point: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: f64,
    },
    TemporalDiff {
        x: Var,
        t: usize,
    },
    DropFirst {
        x: Var,
        t: usize,
    },
    Concat {
        parts: Vec<Var>,
    },
    Reshape {
        x: Var,
    },
    MaxPoolTime {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis1 {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1dTime {
        x: Var,
        w: Var,
        b: Var,
    },
    SumSquares {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`; zero when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects a rank-4 N×H×W×C tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn dims5(op: &'static str, t: &Tensor) -> Result<[usize; 5]> {
    match *t.shape() {
        [n, a, h, w, c] => Ok([n, a, h, w, c]),
        _ => Err(Error::InvalidArgument(format!(
            "{op} expects a rank-5 tensor, got {:?}",
            t.shape()
        ))),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Sums per-frame partial weight gradients in frame order.
fn reduce_partials(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    for p in &parts {
        add_into(&mut out, p);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("graph operation"));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batch mean and variance recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, spec: KernelSpec) -> Result<Var> {
        spec.validate()?;
        let [n, h, wd, c] = dims4("conv2d", self.value(x))?;
        if c != spec.in_channels {
            return Err(shape_mismatch("conv2d", &[n, h, wd, spec.in_channels], self.value(x).shape()));
        }
        if self.value(w).shape() != spec.weight_shape() {
            return Err(shape_mismatch("conv2d weights", &spec.weight_shape(), self.value(w).shape()));
        }
        let (out, oh, ow) =
            conv2d_batch(self.value(x).data(), n, h, wd, &spec, self.value(w).data())?;
        let t = Tensor::new(vec![n, oh, ow, spec.out_channels], out)?;
        self.push(t, Op::Conv2d { x, w, spec })
    }

    pub fn conv3d(&mut self, x: Var, w: Var, spec: Conv3dSpec) -> Result<Var> {
        spec.spatial.validate()?;
        let [n, t, h, wd, c] = dims5("conv3d", self.value(x))?;
        if c != spec.spatial.in_channels {
            return Err(shape_mismatch(
                "conv3d",
                &[n, t, h, wd, spec.spatial.in_channels],
                self.value(x).shape(),
            ));
        }
        if self.value(w).shape() != spec.weight_shape() {
            return Err(shape_mismatch("conv3d weights", &spec.weight_shape(), self.value(w).shape()));
        }
        let ot = spec.output_time(t)?;
        let (oh, ow) = spec.spatial.output_extents(h, wd)?;
        let co = spec.spatial.out_channels;
        let in_sz = t * h * wd * c;
        let out_sz = ot * oh * ow * co;
        let mut out = vec![0.0; n * out_sz];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        out.par_chunks_mut(out_sz)
            .zip(xv.par_chunks(in_sz))
            .try_for_each(|(o, xs)| conv3d_clip(xs, t, h, wd, &spec, wv, o).map(|_| ()))?;
        let val = Tensor::new(vec![n, ot, oh, ow, co], out)?;
        self.push(val, Op::Conv3d { x, w, spec })
    }

    /// Adds a per-channel bias along the last axis.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().expect("rank >= 1");
        if self.value(b).shape() != [c] {
            return Err(shape_mismatch("bias_add", &[c], self.value(b).shape()));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = xs.clone();
        for chunk in out.data_mut().chunks_exact_mut(c) {
            add_into(chunk, &bv);
        }
        self.push(out, Op::BiasAdd { x, b })
    }

    pub fn deform_input(&mut self, x: Var, off: Var) -> Result<Var> {
        let [n, h, w, c] = dims4("deform_input", self.value(x))?;
        if self.value(off).shape() != [n, h, w, 2] {
            return Err(shape_mismatch("deform_input offsets", &[n, h, w, 2], self.value(off).shape()));
        }
        let d = Dims { h, w, c };
        let mut out = vec![0.0; n * h * w * c];
        let xv = self.value(x).data();
        let ov = self.value(off).data();
        out.par_chunks_mut(h * w * c)
            .zip(xv.par_chunks(h * w * c))
            .zip(ov.par_chunks(h * w * 2))
            .for_each(|((o, xs), offs)| deform_input_frame(xs, d, offs, o));
        let val = Tensor::new(vec![n, h, w, c], out)?;
        self.push(val, Op::DeformInput { x, off })
    }

    /// LCDC computed directly (per-tap sampling with shared offsets).
    pub fn lcdc_conv2d(&mut self, x: Var, w: Var, off: Var, spec: KernelSpec) -> Result<Var> {
        spec.validate()?;
        let [n, h, wd, c] = dims4("lcdc_conv2d", self.value(x))?;
        if c != spec.in_channels || self.value(w).shape() != spec.weight_shape() {
            return Err(shape_mismatch("lcdc_conv2d weights", &spec.weight_shape(), self.value(w).shape()));
        }
        if self.value(off).shape() != [n, h, wd, 2] {
            return Err(shape_mismatch("lcdc_conv2d offsets", &[n, h, wd, 2], self.value(off).shape()));
        }
        let (oh, ow) = spec.output_extents(h, wd)?;
        let co = spec.out_channels;
        let d = Dims { h, w: wd, c };
        let mut out = vec![0.0; n * oh * ow * co];
        let xv = self.value(x).data();
        let ov = self.value(off).data();
        let wv = self.value(w).data();
        out.par_chunks_mut(oh * ow * co)
            .zip(xv.par_chunks(h * wd * c))
            .zip(ov.par_chunks(h * wd * 2))
            .for_each(|((o, xs), offs)| lcdc_frame(xs, d, offs, &spec, wv, o, oh, ow));
        let val = Tensor::new(vec![n, oh, ow, co], out)?;
        self.push(val, Op::Lcdc { x, w, off, spec })
    }

    pub fn deformable_conv2d(&mut self, x: Var, w: Var, off: Var, spec: KernelSpec) -> Result<Var> {
        spec.validate()?;
        let [n, h, wd, c] = dims4("deformable_conv2d", self.value(x))?;
        if c != spec.in_channels || self.value(w).shape() != spec.weight_shape() {
            return Err(shape_mismatch(
                "deformable_conv2d weights",
                &spec.weight_shape(),
                self.value(w).shape(),
            ));
        }
        let (oh, ow) = spec.output_extents(h, wd)?;
        let expected = [n, oh, ow, spec.groups, spec.taps(), 2];
        if self.value(off).shape() != expected {
            return Err(shape_mismatch("deformable_conv2d offsets", &expected, self.value(off).shape()));
        }
        let co = spec.out_channels;
        let d = Dims { h, w: wd, c };
        let osz = oh * ow * spec.groups * spec.taps() * 2;
        let mut out = vec![0.0; n * oh * ow * co];
        let xv = self.value(x).data();
        let ov = self.value(off).data();
        let wv = self.value(w).data();
        out.par_chunks_mut(oh * ow * co)
            .zip(xv.par_chunks(h * wd * c))
            .zip(ov.par_chunks(osz))
            .for_each(|((o, xs), offs)| deform_frame(xs, d, offs, &spec, wv, o, oh, ow));
        let val = Tensor::new(vec![n, oh, ow, co], out)?;
        self.push(val, Op::DeformConv { x, w, off, spec })
    }

    /// Expands `N×H×W×2` local offsets to dense per-tap form for `spec`.
    pub fn expand_offsets(&mut self, off: Var, spec: KernelSpec, mode: ExpandMode) -> Result<Var> {
        spec.validate()?;
        let [n, lh, lw, two] = dims4("expand_offsets", self.value(off))?;
        if two != 2 {
            return Err(shape_mismatch("expand_offsets", &[n, lh, lw, 2], self.value(off).shape()));
        }
        let (oh, ow) = match mode {
            ExpandMode::Shifted => spec.output_extents(lh, lw)?,
            ExpandMode::Replicated => (lh, lw),
        };
        let frame_idx = expand_index(&spec, mode, (lh, lw), (oh, ow));
        let per = frame_idx.len();
        let mut idx = Vec::with_capacity(per * n);
        for f in 0..n {
            idx.extend(frame_idx.iter().map(|m| m.map(|m| f * lh * lw + m)));
        }
        let src = self.value(off).data();
        let mut data = vec![0.0; idx.len() * 2];
        for (slot, m) in idx.iter().enumerate() {
            if let Some(m) = *m {
                data[slot * 2] = src[m * 2];
                data[slot * 2 + 1] = src[m * 2 + 1];
            }
        }
        let val = Tensor::new(vec![n, oh, ow, spec.groups, spec.taps(), 2], data)?;
        self.push(val, Op::Expand { off, idx })
    }

    /// Bilinear sample of an `H×W` plane at a `[row, col]` point.
    pub fn sample(&mut self, plane: Var, point: Var) -> Result<Var> {
        let &[h, w] = self.value(plane).shape() else {
            return Err(Error::InvalidArgument("sample expects an HxW plane".into()));
        };
        if self.value(point).shape() != [2] {
            return Err(shape_mismatch("sample point", &[2], self.value(point).shape()));
        }
        let p = self.value(point).data();
        let v = Bilinear::new(h, w, p[0], p[1]).sample(self.value(plane).data(), 1, 0);
        self.push(Tensor::scalar(v), Op::Sample { plane, point })
    }

    /// Batch normalization with batch statistics over every axis but the last.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().expect("rank >= 1");
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_mismatch("batch_norm", &[c], self.value(gamma).shape()));
        }
        let m = xs.len() / c;
        let mut mean = vec![0.0; c];
        for row in xs.data().chunks_exact(c) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; c];
        for row in xs.data().chunks_exact(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = xs.clone();
        for (i, (o, &xv)) in out.data_mut().iter_mut().zip(xs.data()).enumerate() {
            let j = i % c;
            let xh = (xv - mean[j]) * inv_std[j];
            xhat[i] = xh;
            *o = g[j] * xh + b[j];
        }
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    /// `y = scale·x + shift` per channel with constant coefficients (batch
    /// norm in evaluation mode).
    pub fn channel_affine(&mut self, x: Var, scale: Vec<f64>, shift: &[f64]) -> Result<Var> {
        let xs = self.value(x);
        let c = *xs.shape().last().expect("rank >= 1");
        if scale.len() != c || shift.len() != c {
            return Err(shape_mismatch("channel_affine", &[c], &[scale.len()]));
        }
        let mut out = xs.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for j in 0..c {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        self.push(out, Op::ChannelAffine { x, scale })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub { a, b })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale { x, s })
    }

    fn frames_of(&self, op: &'static str, x: Var, t: usize) -> Result<(usize, usize)> {
        let s = self.value(x).shape();
        if t < 2 || s.len() < 2 || s[0] % t != 0 {
            return Err(Error::InvalidArgument(format!(
                "{op}: leading axis of {s:?} is not a whole number of {t}-frame snippets"
            )));
        }
        Ok((s[0] / t, self.value(x).len() / s[0]))
    }

    /// For `B` snippets of `t` frames stacked on the leading axis, returns the
    /// `B·(t−1)` consecutive differences `x[t] − x[t−1]`.
    pub fn temporal_diff(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, fsz) = self.frames_of("temporal_diff", x, t)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * (t - 1) * fsz);
        for bi in 0..b {
            for s in 1..t {
                let cur = &src[(bi * t + s) * fsz..][..fsz];
                let prev = &src[(bi * t + s - 1) * fsz..][..fsz];
                out.extend(cur.iter().zip(prev).map(|(a, p)| a - p));
            }
        }
        let mut shape = self.value(x).shape().to_vec();
        shape[0] = b * (t - 1);
        self.push(Tensor::new(shape, out)?, Op::TemporalDiff { x, t })
    }

    /// Drops the first frame of every `t`-frame snippet.
    pub fn drop_first(&mut self, x: Var, t: usize) -> Result<Var> {
        let (b, fsz) = self.frames_of("drop_first", x, t)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * (t - 1) * fsz);
        for bi in 0..b {
            out.extend_from_slice(&src[(bi * t + 1) * fsz..(bi + 1) * t * fsz]);
        }
        let mut shape = self.value(x).shape().to_vec();
        shape[0] = b * (t - 1);
        self.push(Tensor::new(shape, out)?, Op::DropFirst { x, t })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if &s[..s.len() - 1] != lead {
                return Err(shape_mismatch("concat", &first, s));
            }
            widths.push(*s.last().expect("rank >= 1"));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push(out, Op::Reshape { x })
    }

    /// Max pooling along the time axis of an `N×T×H×W×C` tensor.
    pub fn max_pool_time(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let [n, t, h, w, c] = dims5("max_pool_time", self.value(x))?;
        if size == 0 || stride == 0 {
            return Err(Error::InvalidArgument("pool size and stride must be positive".into()));
        }
        if t < size {
            return Err(Error::SnippetTooShort {
                extent: t,
                kernel: size,
            });
        }
        let ot = (t - size) / stride + 1;
        let fsz = h * w * c;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * ot * fsz];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for to in 0..ot {
                for e in 0..fsz {
                    let mut best = (b * t + to * stride) * fsz + e;
                    for k in 1..size {
                        let cand = (b * t + to * stride + k) * fsz + e;
                        if src[cand] > src[best] {
                            best = cand;
                        }
                    }
                    let o = (b * ot + to) * fsz + e;
                    out[o] = src[best];
                    argmax[o] = best;
                }
            }
        }
        let val = Tensor::new(vec![n, ot, h, w, c], out)?;
        self.push(val, Op::MaxPoolTime { x, argmax })
    }

    /// Mean over the middle axis of an `A×M×B` tensor, giving `A×B`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let &[a, m, b] = self.value(x).shape() else {
            return Err(Error::InvalidArgument(format!(
                "mean_axis1 expects rank 3, got {:?}",
                self.value(x).shape()
            )));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; a * b];
        for i in 0..a {
            let o = &mut out[i * b..(i + 1) * b];
            for k in 0..m {
                add_into(o, &src[(i * m + k) * b..][..b]);
            }
            o.iter_mut().for_each(|v| *v /= m as f64);
        }
        self.push(Tensor::new(vec![a, b], out)?, Op::MeanAxis1 { x })
    }

    /// `y = x·wᵀ + b` for `x: N×F`, `w: O×F`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let &[n, f] = self.value(x).shape() else {
            return Err(Error::InvalidArgument("linear expects N×F input".into()));
        };
        let &[o, fw] = self.value(w).shape() else {
            return Err(Error::InvalidArgument("linear expects O×F weights".into()));
        };
        if fw != f || self.value(b).shape() != [o] {
            return Err(shape_mismatch("linear", &[o, f], self.value(w).shape()));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            for j in 0..o {
                out[i * o + j] = crate::conv::dot(&xv[i * f..][..f], &wv[j * f..][..f]) + bv[j];
            }
        }
        self.push(Tensor::new(vec![n, o], out)?, Op::Linear { x, w, b })
    }

    /// Same-padded 1D convolution over the first axis of an `S×C` sequence
    /// with `O×k×C` weights (odd `k`) and bias `O`.
    pub fn conv1d_time(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let &[s, c] = self.value(x).shape() else {
            return Err(Error::InvalidArgument("conv1d_time expects S×C input".into()));
        };
        let &[o, k, wc] = self.value(w).shape() else {
            return Err(Error::InvalidArgument("conv1d_time expects O×k×C weights".into()));
        };
        if wc != c || self.value(b).shape() != [o] || k % 2 == 0 {
            return Err(shape_mismatch("conv1d_time", &[o, k, c], self.value(w).shape()));
        }
        if s < k {
            return Err(Error::SnippetTooShort {
                extent: s,
                kernel: k,
            });
        }
        let half = (k - 1) / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; s * o];
        for t in 0..s {
            for j in 0..o {
                let mut acc = 0.0;
                for a in 0..k {
                    let ti = t as isize + a as isize - half as isize;
                    if ti < 0 || ti as usize >= s {
                        continue;
                    }
                    acc += crate::conv::dot(&wv[(j * k + a) * c..][..c], &xv[ti as usize * c..][..c]);
                }
                out[t * o + j] = acc + bv[j];
            }
        }
        self.push(Tensor::new(vec![s, o], out)?, Op::Conv1dTime { x, w, b })
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum_squares();
        self.push(Tensor::scalar(v), Op::SumSquares { x })
    }

    /// Mean softmax cross-entropy of `N×C` logits against `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, c] = self.value(logits).shape() else {
            return Err(Error::InvalidArgument("softmax_xent expects N×C logits".into()));
        };
        if labels.len() != n {
            return Err(shape_mismatch("softmax_xent labels", &[n], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidArgument(format!("label {bad} >= class count {c}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[i * c + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[i]];
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxXent {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Reverse pass from `output`, seeded with `seed` (same shape as the
    /// output). Returns the gradient of `⟨seed, output⟩` for every node.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(shape_mismatch("backward seed", self.value(output).shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(e) => add_into(e.data_mut(), t.data()),
                slot @ None => *slot = Some(t),
            }
        };
        let shaped = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, spec } => {
                let [n, h, wd, c] = dims4("conv2d", self.value(*x))?;
                let [_, oh, ow, co] = dims4("conv2d", &self.nodes[id].value)?;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let wlen = wv.len();
                let mut dx = vec![0.0; xv.len()];
                let parts: Vec<Vec<f64>> = dx
                    .par_chunks_mut(h * wd * c)
                    .zip(xv.par_chunks(h * wd * c))
                    .zip(gd.par_chunks(oh * ow * co))
                    .map(|((dxf, xf), gf)| {
                        let mut dw = vec![0.0; wlen];
                        conv2d_frame_backward(xf, h, wd, spec, wv, gf, oh, ow, Some(dxf), Some(&mut dw));
                        dw
                    })
                    .collect();
                debug_assert_eq!(parts.len(), n);
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *w, shaped(*w, reduce_partials(parts, wlen)));
            }
            Op::Conv3d { x, w, spec } => {
                let [_, t, h, wd, c] = dims5("conv3d", self.value(*x))?;
                let out_sz: usize = self.nodes[id].value.shape()[1..].iter().product();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let wlen = wv.len();
                let mut dx = vec![0.0; xv.len()];
                let parts: Vec<Vec<f64>> = dx
                    .par_chunks_mut(t * h * wd * c)
                    .zip(xv.par_chunks(t * h * wd * c))
                    .zip(gd.par_chunks(out_sz))
                    .map(|((dxf, xf), gf)| {
                        let mut dw = vec![0.0; wlen];
                        conv3d_clip_backward(xf, t, h, wd, spec, wv, gf, dxf, &mut dw)
                            .expect("validated in forward");
                        dw
                    })
                    .collect();
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *w, shaped(*w, reduce_partials(parts, wlen)));
            }
            Op::BiasAdd { x, b } => {
                let c = self.value(*b).len();
                let mut db = vec![0.0; c];
                for row in gd.chunks_exact(c) {
                    add_into(&mut db, row);
                }
                acc(grads, *x, g.clone());
                acc(grads, *b, shaped(*b, db));
            }
            Op::DeformInput { x, off } => {
                let [_, h, w, c] = dims4("deform_input", self.value(*x))?;
                let d = Dims { h, w, c };
                let xv = self.value(*x).data();
                let ov = self.value(*off).data();
                let mut dx = vec![0.0; xv.len()];
                let mut doff = vec![0.0; ov.len()];
                dx.par_chunks_mut(h * w * c)
                    .zip(doff.par_chunks_mut(h * w * 2))
                    .zip(xv.par_chunks(h * w * c).zip(ov.par_chunks(h * w * 2)))
                    .zip(gd.par_chunks(h * w * c))
                    .for_each(|(((dxf, dof), (xf, of)), gf)| {
                        deform_input_frame_backward(xf, d, of, gf, dxf, dof)
                    });
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *off, shaped(*off, doff));
            }
            Op::Lcdc { x, w, off, spec } | Op::DeformConv { x, w, off, spec } => {
                let direct = matches!(self.nodes[id].op, Op::Lcdc { .. });
                let [_, h, wd, c] = dims4("deform conv", self.value(*x))?;
                let [_, oh, ow, co] = dims4("deform conv", &self.nodes[id].value)?;
                let d = Dims { h, w: wd, c };
                let xv = self.value(*x).data();
                let ov = self.value(*off).data();
                let wv = self.value(*w).data();
                let wlen = wv.len();
                let osz = self.value(*off).len() / self.value(*x).shape()[0];
                let mut dx = vec![0.0; xv.len()];
                let mut doff = vec![0.0; ov.len()];
                let parts: Vec<Vec<f64>> = dx
                    .par_chunks_mut(h * wd * c)
                    .zip(doff.par_chunks_mut(osz))
                    .zip(xv.par_chunks(h * wd * c).zip(ov.par_chunks(osz)))
                    .zip(gd.par_chunks(oh * ow * co))
                    .map(|(((dxf, dof), (xf, of)), gf)| {
                        let mut dw = vec![0.0; wlen];
                        let fg = FrameGrads {
                            dx: dxf,
                            doff: dof,
                            dw: &mut dw,
                        };
                        if direct {
                            lcdc_frame_backward(xf, d, of, spec, wv, gf, oh, ow, fg);
                        } else {
                            deform_frame_backward(xf, d, of, spec, wv, gf, oh, ow, fg);
                        }
                        dw
                    })
                    .collect();
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *off, shaped(*off, doff));
                acc(grads, *w, shaped(*w, reduce_partials(parts, wlen)));
            }
            Op::Expand { off, idx } => {
                let mut d = vec![0.0; self.value(*off).len()];
                for (slot, m) in idx.iter().enumerate() {
                    if let Some(m) = *m {
                        d[m * 2] += gd[slot * 2];
                        d[m * 2 + 1] += gd[slot * 2 + 1];
                    }
                }
                acc(grads, *off, shaped(*off, d));
            }
            Op::Sample { plane, point } => {
                let &[h, w] = self.value(*plane).shape() else {
                    unreachable!("checked in forward")
                };
                let p = self.value(*point).data();
                let bl = Bilinear::new(h, w, p[0], p[1]);
                let mut dp = vec![0.0; h * w];
                bl.scatter(&mut dp, 1, 0, gd[0]);
                let (gr, gc) = bl.point_grad(self.value(*plane).data(), 1, 0);
                acc(grads, *plane, shaped(*plane, dp));
                acc(grads, *point, shaped(*point, vec![gd[0] * gr, gd[0] * gc]));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = inv_std.len();
                let m = (xhat.len() / c) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, &gi) in gd.iter().enumerate() {
                    let j = i % c;
                    dgamma[j] += gi * xhat[i];
                    dbeta[j] += gi;
                }
                let mut dx = vec![0.0; gd.len()];
                for (i, d) in dx.iter_mut().enumerate() {
                    let j = i % c;
                    let dxhat = gd[i] * gv[j];
                    *d = inv_std[j] / m
                        * (m * dxhat - gv[j] * dbeta[j] - xhat[i] * gv[j] * dgamma[j]);
                }
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *gamma, shaped(*gamma, dgamma));
                acc(grads, *beta, shaped(*beta, dbeta));
            }
            Op::ChannelAffine { x, scale } => {
                let c = scale.len();
                let dx = gd.iter().enumerate().map(|(i, &v)| v * scale[i % c]).collect();
                acc(grads, *x, shaped(*x, dx));
            }
            Op::Relu { x } => {
                let dx = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                acc(grads, *x, shaped(*x, dx));
            }
            Op::Add { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Scale { x, s } => acc(grads, *x, g.scale(*s)),
            Op::TemporalDiff { x, t } => {
                let (b, fsz) = self.frames_of("temporal_diff", *x, *t)?;
                let mut dx = vec![0.0; self.value(*x).len()];
                for bi in 0..b {
                    for s in 1..*t {
                        let gs = &gd[(bi * (t - 1) + s - 1) * fsz..][..fsz];
                        for (e, &gv) in gs.iter().enumerate() {
                            dx[(bi * t + s) * fsz + e] += gv;
                            dx[(bi * t + s - 1) * fsz + e] -= gv;
                        }
                    }
                }
                acc(grads, *x, shaped(*x, dx));
            }
            Op::DropFirst { x, t } => {
                let (b, fsz) = self.frames_of("drop_first", *x, *t)?;
                let mut dx = vec![0.0; self.value(*x).len()];
                for bi in 0..b {
                    dx[(bi * t + 1) * fsz..(bi + 1) * t * fsz]
                        .copy_from_slice(&gd[bi * (t - 1) * fsz..(bi + 1) * (t - 1) * fsz]);
                }
                acc(grads, *x, shaped(*x, dx));
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.value(p).shape().last().expect("rank"))
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut outs: Vec<Vec<f64>> =
                    widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut o = r * total;
                    for (k, &w) in widths.iter().enumerate() {
                        outs[k].extend_from_slice(&gd[o..o + w]);
                        o += w;
                    }
                }
                for (&p, d) in parts.iter().zip(outs) {
                    acc(grads, p, shaped(p, d));
                }
            }
            Op::Reshape { x } => acc(grads, *x, shaped(*x, gd.to_vec())),
            Op::MaxPoolTime { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gd[o];
                }
                acc(grads, *x, shaped(*x, dx));
            }
            Op::MeanAxis1 { x } => {
                let &[a, m, b] = self.value(*x).shape() else {
                    unreachable!("checked in forward")
                };
                let mut dx = vec![0.0; a * m * b];
                for i in 0..a {
                    for k in 0..m {
                        for j in 0..b {
                            dx[(i * m + k) * b + j] = gd[i * b + j] / m as f64;
                        }
                    }
                }
                acc(grads, *x, shaped(*x, dx));
            }
            Op::Linear { x, w, b } => {
                let &[n, f] = self.value(*x).shape() else {
                    unreachable!("checked in forward")
                };
                let o = self.value(*b).len();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0; n * f];
                let mut dw = vec![0.0; o * f];
                let mut db = vec![0.0; o];
                for i in 0..n {
                    for j in 0..o {
                        let gj = gd[i * o + j];
                        db[j] += gj;
                        for k in 0..f {
                            dx[i * f + k] += gj * wv[j * f + k];
                            dw[j * f + k] += gj * xv[i * f + k];
                        }
                    }
                }
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *w, shaped(*w, dw));
                acc(grads, *b, shaped(*b, db));
            }
            Op::Conv1dTime { x, w, b } => {
                let &[s, c] = self.value(*x).shape() else {
                    unreachable!("checked in forward")
                };
                let &[o, k, _] = self.value(*w).shape() else {
                    unreachable!("checked in forward")
                };
                let half = (k - 1) / 2;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![0.0; s * c];
                let mut dw = vec![0.0; o * k * c];
                let mut db = vec![0.0; o];
                for t in 0..s {
                    for j in 0..o {
                        let gj = gd[t * o + j];
                        db[j] += gj;
                        for a in 0..k {
                            let ti = t as isize + a as isize - half as isize;
                            if ti < 0 || ti as usize >= s {
                                continue;
                            }
                            let ti = ti as usize;
                            for e in 0..c {
                                dx[ti * c + e] += gj * wv[(j * k + a) * c + e];
                                dw[(j * k + a) * c + e] += gj * xv[ti * c + e];
                            }
                        }
                    }
                }
                acc(grads, *x, shaped(*x, dx));
                acc(grads, *w, shaped(*w, dw));
                acc(grads, *b, shaped(*b, db));
            }
            Op::SumSquares { x } => {
                let s = 2.0 * gd[0];
                acc(grads, *x, self.value(*x).scale(s));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                let s = gd[0] / n as f64;
                d.iter_mut().for_each(|v| *v *= s);
                acc(grads, *logits, shaped(*logits, d));
            }
        }
        Ok(())
    }
}
