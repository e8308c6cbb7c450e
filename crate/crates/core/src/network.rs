//! The toy spatio-temporal network.
//!
//! Every frame goes through the same trunk: a few conv-BN-ReLU stages
//! followed by `blocks` residual deformable blocks. Each block learns an
//! offset field from its input; the frame-to-frame differences of those
//! fields are the motion channels. Fusion concatenates the appearance of
//! frame `t` (output of the last block) with the motion of every block at
//! `t`, runs a stack of conv3d-BN-ReLU-maxpool stages, averages over the
//! remaining time steps and positions, and classifies with two dense layers.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var, BN_EPS};
use crate::conv::{Conv3dSpec, KernelSpec};
use crate::deform::ExpandMode;
use crate::error::{Error, Result};
use crate::rng::{hash_seed, XorShift64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// One shared offset per location, applied through the input.
    Lcdc,
    /// Per-tap, per-group offsets (`G·K·2` learner channels).
    Dense,
    /// One offset per output location copied to every tap.
    Replicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionStage {
    pub channels: usize,
    pub kt: usize,
    pub t_stride: usize,
    pub spatial: usize,
    pub pool: usize,
    pub pool_stride: usize,
}

impl Default for FusionStage {
    fn default() -> Self {
        Self {
            channels: 16,
            kt: 4,
            t_stride: 2,
            spatial: 3,
            pool: 2,
            pool_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub trunk_widths: Vec<usize>,
    pub trunk_strides: Vec<usize>,
    pub blocks: usize,
    pub block_kernel: usize,
    pub block_dilation: usize,
    pub variant: Variant,
    pub groups: usize,
    pub fusion: Vec<FusionStage>,
    pub fc_hidden: usize,
    pub classes: usize,
    pub bn_momentum: f64,
    /// Single-frame baseline: trunk, spatial average and classifier only.
    pub appearance_only: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            t: 16,
            h: 32,
            w: 32,
            c: 1,
            trunk_widths: vec![4, 8, 8],
            trunk_strides: vec![2, 2, 1],
            blocks: 3,
            block_kernel: 3,
            block_dilation: 1,
            variant: Variant::Lcdc,
            groups: 1,
            fusion: vec![
                FusionStage {
                    kt: 3,
                    ..FusionStage::default()
                },
                FusionStage {
                    kt: 2,
                    t_stride: 1,
                    ..FusionStage::default()
                },
            ],
            fc_hidden: 32,
            classes: 4,
            bn_momentum: 0.9,
            appearance_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TemporalRow {
    pub stage: usize,
    pub op: &'static str,
    pub input: usize,
    pub output: usize,
}

impl fmt::Display for TemporalRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.stage, self.op, self.input, self.output)
    }
}

/// Walks the time axis through every fusion stage. Conv gives
/// `⌊(n−kt)/s⌋+1` and pooling `⌊(n−p)/ps⌋+1`; an op that does not fit
/// yields output 0 and ends the table.
pub fn temporal_table(steps: usize, stages: &[FusionStage]) -> Vec<TemporalRow> {
    let mut rows = Vec::new();
    let mut n = steps;
    for (i, s) in stages.iter().enumerate() {
        for (op, k, st) in [("conv", s.kt, s.t_stride), ("pool", s.pool, s.pool_stride)] {
            let out = if n >= k && st > 0 { (n - k) / st + 1 } else { 0 };
            rows.push(TemporalRow {
                stage: i,
                op,
                input: n,
                output: out,
            });
            if out == 0 {
                return rows;
            }
            n = out;
        }
    }
    rows
}

impl NetConfig {
    /// Extents after the trunk stages.
    pub fn feature_extents(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = (self.h, self.w);
        let mut cin = self.c;
        for (&cw, &s) in self.trunk_widths.iter().zip(&self.trunk_strides) {
            (h, w) = KernelSpec::same(3, cin, cw).with_stride(s).output_extents(h, w)?;
            cin = cw;
        }
        Ok((h, w))
    }

    pub fn feature_channels(&self) -> usize {
        *self.trunk_widths.last().unwrap_or(&self.c)
    }

    pub fn block_spec(&self) -> KernelSpec {
        let c = self.feature_channels();
        let k = self.block_kernel;
        KernelSpec::same(k, c, c)
            .with_dilation(self.block_dilation)
            .with_padding(self.block_dilation * (k - 1) / 2)
            .with_groups(self.groups)
    }

    /// Output channels of one block's offset learner.
    pub fn offset_channels(&self) -> usize {
        match self.variant {
            Variant::Dense => self.groups * self.block_spec().taps() * 2,
            Variant::Lcdc | Variant::Replicated => 2,
        }
    }

    pub fn offset_learner_spec(&self) -> KernelSpec {
        let c = self.feature_channels();
        let k = self.block_kernel;
        KernelSpec::same(k, c, self.offset_channels())
    }

    pub fn fusion_in_channels(&self) -> usize {
        self.feature_channels() + self.blocks * self.offset_channels()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.h == 0 || self.w == 0 || self.c == 0 || self.classes == 0 {
            return bad("extents and class count must be positive".into());
        }
        if self.trunk_widths.is_empty() || self.trunk_widths.len() != self.trunk_strides.len() {
            return bad("trunk_widths and trunk_strides must be non-empty and equally long".into());
        }
        if self.trunk_widths.contains(&0) || self.trunk_strides.contains(&0) {
            return bad("trunk widths and strides must be positive".into());
        }
        if self.blocks == 0 {
            return bad("at least one deformable block is required".into());
        }
        if self.block_kernel % 2 == 0 || self.block_dilation == 0 {
            return bad("block kernel must be odd and dilation positive".into());
        }
        if self.groups == 0 || self.feature_channels() % self.groups != 0 {
            return bad(format!(
                "groups {} must divide the feature channels {}",
                self.groups,
                self.feature_channels()
            ));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum must lie in [0, 1)".into());
        }
        if self.fc_hidden == 0 {
            return bad("fc_hidden must be positive".into());
        }
        self.feature_extents()?;
        if self.appearance_only {
            return Ok(());
        }
        if self.t < 2 {
            return bad("motion needs at least two frames".into());
        }
        for s in &self.fusion {
            if s.channels == 0 || s.kt == 0 || s.t_stride == 0 || s.pool == 0 || s.pool_stride == 0 {
                return bad("fusion stage sizes must be positive".into());
            }
            if s.spatial % 2 == 0 {
                return bad("fusion spatial kernel must be odd".into());
            }
        }
        let table = temporal_table(self.t - 1, &self.fusion);
        if table.last().is_some_and(|r| r.output == 0) {
            let trace: Vec<String> = std::iter::once((self.t - 1).to_string())
                .chain(table.iter().map(|r| r.output.to_string()))
                .collect();
            return bad(format!(
                "fusion leaves no time step to average: {}",
                trace.join("->")
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    /// Convolution, offset-learner and dense weights; subject to decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
    /// Batch-norm running statistics; not trained.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetParams {
    pub entries: Vec<Param>,
}

impl NetParams {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.entries[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index(name).map(|i| &mut self.entries[i].value)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.entries.iter().enumerate().filter(|(_, p)| p.kind != ParamKind::Running)
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor) {
        self.entries.push(Param { name, kind, value });
    }
}

/// Parameter totals for one configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    /// Offset-learner kernels and biases only.
    pub deform_related: usize,
}

/// Per-block offset-learner size: `kh·kw·C_in·out + out` with `out = 2` for
/// a shared field and `G·kh·kw·2` for dense offsets.
pub fn offset_learner_params(kh: usize, kw: usize, c_in: usize, dense_groups: Option<usize>) -> usize {
    let out = match dense_groups {
        Some(g) => g * kh * kw * 2,
        None => 2,
    };
    kh * kw * c_in * out + out
}

/// Counts every trainable parameter of `cfg` with the block variant
/// replaced by `variant`.
pub fn param_count(cfg: &NetConfig, variant: Variant) -> Result<ParamCount> {
    let cfg = NetConfig {
        variant,
        ..cfg.clone()
    };
    let p = init_params(&cfg, 0)?;
    let mut total = 0;
    let mut deform = 0;
    for (_, e) in p.trainable() {
        total += e.value.len();
        if e.name.contains(".phi") {
            deform += e.value.len();
        }
    }
    Ok(ParamCount {
        total,
        deform_related: deform,
    })
}

/// Dense over shared offset-learner parameters for the same trunk.
pub fn deform_ratio(cfg: &NetConfig) -> Result<f64> {
    let dense = param_count(cfg, Variant::Dense)?.deform_related;
    let local = param_count(cfg, Variant::Lcdc)?.deform_related;
    Ok(dense as f64 / local as f64)
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut XorShift64) -> Tensor {
    let sd = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| sd * rng.normal())
}

fn push_bn(p: &mut NetParams, prefix: &str, c: usize) {
    p.push(format!("{prefix}.bn.gamma"), ParamKind::Norm, Tensor::full(&[c], 1.0));
    p.push(format!("{prefix}.bn.beta"), ParamKind::Norm, Tensor::zeros(&[c]));
    p.push(format!("{prefix}.bn.mean"), ParamKind::Running, Tensor::zeros(&[c]));
    p.push(format!("{prefix}.bn.var"), ParamKind::Running, Tensor::full(&[c], 1.0));
}

/// Seeded initialization. Offset learners start at zero so every block
/// begins as a plain convolution.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<NetParams> {
    cfg.validate()?;
    let mut p = NetParams::default();
    let mut rng = XorShift64::new(hash_seed(&[seed, 0x1417]));
    let mut cin = cfg.c;
    for (i, &cw) in cfg.trunk_widths.iter().enumerate() {
        let spec = KernelSpec::same(3, cin, cw);
        p.push(
            format!("trunk.{i}.w"),
            ParamKind::Weight,
            he_normal(&spec.weight_shape(), 9 * cin, &mut rng),
        );
        push_bn(&mut p, &format!("trunk.{i}"), cw);
        cin = cw;
    }
    let bs = cfg.block_spec();
    let ls = cfg.offset_learner_spec();
    for b in 0..cfg.blocks {
        p.push(format!("block.{b}.phi"), ParamKind::Weight, Tensor::zeros(&ls.weight_shape()));
        p.push(format!("block.{b}.phi_b"), ParamKind::Bias, Tensor::zeros(&[ls.out_channels]));
        p.push(
            format!("block.{b}.w"),
            ParamKind::Weight,
            he_normal(&bs.weight_shape(), bs.taps() * cin, &mut rng),
        );
        push_bn(&mut p, &format!("block.{b}"), cin);
    }
    let mut feat = cin;
    if !cfg.appearance_only {
        let mut fc = cfg.fusion_in_channels();
        for (i, s) in cfg.fusion.iter().enumerate() {
            let spec = fusion_spec(s, fc);
            p.push(
                format!("fusion.{i}.w"),
                ParamKind::Weight,
                he_normal(&spec.weight_shape(), s.kt * s.spatial * s.spatial * fc, &mut rng),
            );
            push_bn(&mut p, &format!("fusion.{i}"), s.channels);
            fc = s.channels;
        }
        feat = fc;
    }
    p.push("fc1.w".into(), ParamKind::Weight, he_normal(&[cfg.fc_hidden, feat], feat, &mut rng));
    p.push("fc1.b".into(), ParamKind::Bias, Tensor::zeros(&[cfg.fc_hidden]));
    p.push(
        "fc2.w".into(),
        ParamKind::Weight,
        he_normal(&[cfg.classes, cfg.fc_hidden], cfg.fc_hidden, &mut rng),
    );
    p.push("fc2.b".into(), ParamKind::Bias, Tensor::zeros(&[cfg.classes]));
    Ok(p)
}

fn fusion_spec(s: &FusionStage, cin: usize) -> Conv3dSpec {
    Conv3dSpec {
        kt: s.kt,
        t_stride: s.t_stride,
        spatial: KernelSpec::same(s.spatial, cin, s.channels),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Graph handles produced by [`build_forward`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub logits: Var,
    /// One leaf per entry of [`NetParams::entries`].
    pub params: Vec<Var>,
    /// Offset-learner output per block, `N×h×w×offset_channels`.
    pub offsets: Vec<Var>,
    /// Motion per block, `B·(T−1)×h×w×offset_channels`.
    pub motions: Vec<Var>,
    /// Last-block output for every frame.
    pub appearance: Var,
    /// `(running-mean param index, batch norm node)` pairs in training mode.
    pub norms: Vec<(usize, Var)>,
}

struct Builder<'a> {
    params: &'a NetParams,
    vars: Vec<Var>,
    mode: Mode,
    norms: Vec<(usize, Var)>,
}

impl Builder<'_> {
    fn var(&self, name: &str) -> Var {
        self.vars[self.params.index(name).unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn bn(&mut self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        match self.mode {
            Mode::Train => {
                let (gm, bt) = (self.var(&format!("{prefix}.bn.gamma")), self.var(&format!("{prefix}.bn.beta")));
                let y = g.batch_norm(x, gm, bt)?;
                let mi = self.params.index(&format!("{prefix}.bn.mean")).expect("bn mean");
                self.norms.push((mi, y));
                Ok(y)
            }
            Mode::Eval => {
                let get = |s: &str| self.params.get(&format!("{prefix}.bn.{s}")).expect("bn param").data();
                let (gm, bt, mean, var) = (get("gamma"), get("beta"), get("mean"), get("var"));
                let scale: Vec<f64> = gm.iter().zip(var).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f64> = bt.iter().zip(mean).zip(&scale).map(|((b, m), s)| b - m * s).collect();
                g.channel_affine(x, scale, &shift)
            }
        }
    }
}

/// Records the network on `g` for `frames` holding `B` snippets of
/// `cfg.t` frames stacked as `B·T×H×W×C` (or `B×H×W×C` for the
/// appearance-only baseline).
pub fn build_forward(
    g: &mut Graph,
    cfg: &NetConfig,
    params: &NetParams,
    frames: Tensor,
    mode: Mode,
) -> Result<ForwardVars> {
    let vars: Vec<Var> = params.entries.iter().map(|p| g.leaf(p.value.clone())).collect();
    let x = g.leaf(frames);
    build_forward_with(g, cfg, params, vars, x, mode)
}

/// As [`build_forward`] with caller-provided leaves: `vars[i]` holds
/// `params.entries[i]` and `frames` the input.
pub fn build_forward_with(
    g: &mut Graph,
    cfg: &NetConfig,
    params: &NetParams,
    vars: Vec<Var>,
    frames: Var,
    mode: Mode,
) -> Result<ForwardVars> {
    let s = g.value(frames).shape();
    let t = if cfg.appearance_only { 1 } else { cfg.t };
    if s.len() != 4 || s[1..] != [cfg.h, cfg.w, cfg.c] || s[0] == 0 || s[0] % t != 0 {
        return Err(Error::ShapeMismatch {
            op: "network input",
            expected: vec![t, cfg.h, cfg.w, cfg.c],
            actual: s.to_vec(),
        });
    }
    if vars.len() != params.entries.len() {
        return Err(Error::InvalidArgument("one leaf per parameter is required".into()));
    }
    let batch = s[0] / t;
    let mut b = Builder {
        params,
        vars,
        mode,
        norms: Vec::new(),
    };
    let (x, offsets, cin) = trunk_and_blocks(g, cfg, &mut b, frames)?;
    let appearance = x;
    let (fh, fw) = cfg.feature_extents()?;
    let mut motions = Vec::new();
    let pooled = if cfg.appearance_only {
        g.reshape(x, &[batch, fh * fw, cin])?
    } else {
        let mut parts = vec![g.drop_first(x, t)?];
        for &o in &offsets {
            let m = g.temporal_diff(o, t)?;
            motions.push(m);
            parts.push(m);
        }
        let cat = g.concat(&parts)?;
        let mut z = g.reshape(cat, &[batch, t - 1, fh, fw, cfg.fusion_in_channels()])?;
        let mut fc = cfg.fusion_in_channels();
        for (i, st) in cfg.fusion.iter().enumerate() {
            let y = g.conv3d(z, b.var(&format!("fusion.{i}.w")), fusion_spec(st, fc))?;
            let y = b.bn(g, y, &format!("fusion.{i}"))?;
            let y = g.relu(y)?;
            z = g.max_pool_time(y, st.pool, st.pool_stride)?;
            fc = st.channels;
        }
        let steps = g.value(z).shape()[1];
        g.reshape(z, &[batch, steps * fh * fw, fc])?
    };
    let feat = g.mean_axis1(pooled)?;
    let h1 = g.linear(feat, b.var("fc1.w"), b.var("fc1.b"))?;
    let h1 = g.relu(h1)?;
    let logits = g.linear(h1, b.var("fc2.w"), b.var("fc2.b"))?;
    Ok(ForwardVars {
        logits,
        params: b.vars,
        offsets,
        motions,
        appearance,
        norms: b.norms,
    })
}

fn trunk_and_blocks(g: &mut Graph, cfg: &NetConfig, b: &mut Builder, frames: Var) -> Result<(Var, Vec<Var>, usize)> {
    let mut x = frames;
    let mut cin = cfg.c;
    for (i, (&cw, &st)) in cfg.trunk_widths.iter().zip(&cfg.trunk_strides).enumerate() {
        let spec = KernelSpec::same(3, cin, cw).with_stride(st);
        let y = g.conv2d(x, b.var(&format!("trunk.{i}.w")), spec)?;
        let y = b.bn(g, y, &format!("trunk.{i}"))?;
        x = g.relu(y)?;
        cin = cw;
    }
    let bs = cfg.block_spec();
    let ls = cfg.offset_learner_spec();
    let mut offsets = Vec::with_capacity(cfg.blocks);
    for k in 0..cfg.blocks {
        let o = g.conv2d(x, b.var(&format!("block.{k}.phi")), ls)?;
        let o = g.bias_add(o, b.var(&format!("block.{k}.phi_b")))?;
        let w = b.var(&format!("block.{k}.w"));
        let y = match cfg.variant {
            Variant::Lcdc => {
                let shifted = g.deform_input(x, o)?;
                g.conv2d(shifted, w, bs)?
            }
            Variant::Dense => {
                let [n, h, wd, _] = *g.value(o).shape() else {
                    unreachable!("rank 4")
                };
                let d = g.reshape(o, &[n, h, wd, bs.groups, bs.taps(), 2])?;
                g.deformable_conv2d(x, w, d, bs)?
            }
            Variant::Replicated => {
                let d = g.expand_offsets(o, bs, ExpandMode::Replicated)?;
                g.deformable_conv2d(x, w, d, bs)?
            }
        };
        let y = b.bn(g, y, &format!("block.{k}"))?;
        let y = g.add(x, y)?;
        x = g.relu(y)?;
        offsets.push(o);
    }
    Ok((x, offsets, cin))
}

/// Per-frame offset fields of every block in evaluation mode for any
/// `N×H×W×C` stack of frames. Frames are processed independently.
pub fn frame_offsets(frames: &Tensor, params: &NetParams, cfg: &NetConfig) -> Result<Vec<Tensor>> {
    let s = frames.shape();
    if s.len() != 4 || s[1..] != [cfg.h, cfg.w, cfg.c] || s[0] == 0 {
        return Err(Error::ShapeMismatch {
            op: "frame offsets",
            expected: vec![1, cfg.h, cfg.w, cfg.c],
            actual: s.to_vec(),
        });
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.entries.iter().map(|p| g.leaf(p.value.clone())).collect();
    let x = g.leaf(frames.clone());
    let mut b = Builder {
        params,
        vars,
        mode: Mode::Eval,
        norms: Vec::new(),
    };
    let (_, offsets, _) = trunk_and_blocks(&mut g, cfg, &mut b, x)?;
    Ok(offsets.iter().map(|&o| g.value(o).clone()).collect())
}

/// Folds the batch statistics recorded in training mode into the running
/// averages: `r ← m·r + (1−m)·batch`.
pub fn update_running_stats(params: &mut NetParams, g: &Graph, fwd: &ForwardVars, momentum: f64) {
    for &(mi, node) in &fwd.norms {
        let (mean, var) = g.batch_stats(node).expect("training-mode batch norm");
        for (idx, stat) in [(mi, mean), (mi + 1, var)] {
            for (r, &s) in params.entries[idx].value.data_mut().iter_mut().zip(stat) {
                *r = momentum * *r + (1.0 - momentum) * s;
            }
        }
    }
}

/// Result of running one snippet in evaluation mode.
#[derive(Debug, Clone)]
pub struct SnippetOutput {
    pub logits: Vec<f64>,
    /// Per block, the `T×h×w×channels` offset fields.
    pub offsets: Vec<Tensor>,
    /// `T×h×w×C` last-block features.
    pub appearance: Tensor,
}

pub fn forward_snippet(frames: &Tensor, params: &NetParams, cfg: &NetConfig) -> Result<SnippetOutput> {
    let mut g = Graph::new();
    let f = build_forward(&mut g, cfg, params, frames.clone(), Mode::Eval)?;
    Ok(SnippetOutput {
        logits: g.value(f.logits).data().to_vec(),
        offsets: f.offsets.iter().map(|&o| g.value(o).clone()).collect(),
        appearance: g.value(f.appearance).clone(),
    })
}

/// Same-padded 1D convolution over an `S×C` feature sequence followed by a
/// per-step linear classifier. Returns `S×classes` logits.
pub fn temporal_head_1d(
    features: &Tensor,
    conv_w: &Tensor,
    conv_b: &Tensor,
    cls_w: &Tensor,
    cls_b: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.leaf(features.clone());
    let (w, b) = (g.leaf(conv_w.clone()), g.leaf(conv_b.clone()));
    let (cw, cb) = (g.leaf(cls_w.clone()), g.leaf(cls_b.clone()));
    let h = g.conv1d_time(x, w, b)?;
    let y = g.linear(h, cw, cb)?;
    Ok(g.value(y).clone())
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    kind: ParamKind,
    file: String,
    shape: Vec<usize>,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: NetConfig,
    tensors: Vec<ManifestEntry>,
}

/// Writes one TSR file per parameter and `manifest.json` listing names,
/// shapes and SHA-256 digests of the files.
pub fn save_checkpoint(dir: &Path, cfg: &NetConfig, params: &NetParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.entries.len());
    for p in &params.entries {
        let file = format!("{}.tsr", p.name);
        let bytes = p.value.to_tsr_bytes();
        std::fs::write(dir.join(&file), &bytes)?;
        tensors.push(ManifestEntry {
            name: p.name.clone(),
            kind: p.kind,
            file,
            shape: p.value.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let m = Manifest {
        config: cfg.clone(),
        tensors,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Loads a checkpoint, verifying every shape and digest.
pub fn load_checkpoint(dir: &Path) -> Result<(NetConfig, NetParams)> {
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    m.config.validate()?;
    let mut params = NetParams::default();
    for e in m.tensors {
        let bytes = std::fs::read(dir.join(&e.file))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("digest mismatch for {}", e.file),
            });
        }
        let t = Tensor::read_tsr(bytes.as_slice())?;
        if t.shape() != e.shape {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("shape mismatch for {}", e.name),
            });
        }
        params.push(e.name, e.kind, t);
    }
    let expected = init_params(&m.config, 0)?;
    let names = |p: &NetParams| p.entries.iter().map(|e| e.name.clone()).collect::<Vec<_>>();
    if names(&expected) != names(&params) {
        return Err(Error::Format {
            what: "checkpoint",
            reason: "parameter set does not match the configuration".into(),
        });
    }
    Ok((m.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temporal_arithmetic_examples() {
        let paper = [FusionStage::default(), FusionStage::default()];
        let out = |n| temporal_table(n, &paper).iter().map(|r| r.output).collect::<Vec<_>>();
        assert_eq!(out(15), [6, 3, 0]);
        assert_eq!(out(16), [7, 3, 0]);
        assert_eq!(out(22), [10, 5, 1, 0]);
        assert_eq!(out(26), [12, 6, 2, 1]);
        assert_eq!(out(25), [11, 5, 1, 0]);
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = NetConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.feature_extents().unwrap(), (8, 8));
        assert_eq!(cfg.fusion_in_channels(), 8 + 2 * 3);
        let short = NetConfig {
            fusion: vec![FusionStage::default(), FusionStage::default()],
            ..NetConfig::default()
        };
        assert!(matches!(short.validate(), Err(Error::Config(_))));
        let ok = NetConfig { t: 27, ..short };
        ok.validate().unwrap();
    }

    #[test]
    fn counting_examples() {
        assert_eq!(offset_learner_params(3, 3, 8, None), 146);
        assert_eq!(offset_learner_params(3, 3, 8, Some(1)), 1296 + 18);
        assert_eq!(3 * offset_learner_params(3, 3, 512, None), 27_654);
        assert_eq!(3 * offset_learner_params(3, 3, 512, Some(4)), 995_544);
        let cfg = NetConfig {
            blocks: 1,
            ..NetConfig::default()
        };
        assert_eq!(param_count(&cfg, Variant::Lcdc).unwrap().deform_related, 146);
        assert_eq!(deform_ratio(&cfg).unwrap(), 9.0);
        let g4 = NetConfig {
            groups: 4,
            ..NetConfig::default()
        };
        assert_eq!(deform_ratio(&g4).unwrap(), 36.0);
        let one = NetConfig {
            block_kernel: 1,
            ..NetConfig::default()
        };
        assert_eq!(deform_ratio(&one).unwrap(), 1.0);
    }

    #[test]
    fn head_examples() {
        let feats = Tensor::from_fn(&[4, 2], |i| (i[0] * 2 + i[1]) as f64);
        let eye2 = Tensor::from_fn(&[2, 2], |i| f64::from(u8::from(i[0] == i[1])));
        let id_k = Tensor::from_fn(&[2, 3, 2], |i| f64::from(u8::from(i[1] == 1 && i[0] == i[2])));
        let zb = Tensor::zeros(&[2]);
        assert_eq!(temporal_head_1d(&feats, &id_k, &zb, &eye2, &zb).unwrap(), feats);
        let v = Tensor::from_fn(&[3, 2], |i| [0.5, -1.0][i[1]]);
        let avg = Tensor::from_fn(&[2, 3, 2], |i| if i[0] == i[2] { 1.0 / 3.0 } else { 0.0 });
        let cls = Tensor::new(vec![1, 2], vec![2.0, 1.0]).unwrap();
        let cb = Tensor::new(vec![1], vec![0.25]).unwrap();
        let y = temporal_head_1d(&v, &avg, &zb, &cls, &cb).unwrap();
        assert!((y.data()[1] - (2.0 * 0.5 - 1.0 + 0.25)).abs() < 1e-15);
        assert!(temporal_head_1d(&Tensor::zeros(&[2, 2]), &avg, &zb, &eye2, &zb).is_err());
    }
}
