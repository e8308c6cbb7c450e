//! Loss, momentum SGD and the toy training loop.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, CheckLoss, Graph, LeafCheck, Var};
use crate::error::{Error, Result};
use crate::network::{
    build_forward, build_forward_with, init_params, update_running_stats, Mode, NetConfig, NetParams,
    ParamKind,
};
use crate::rng::{hash_seed, XorShift64};
use crate::synthdata::{generate_dataset, SnippetSample, SynthConfig};
use crate::tensor::Tensor;

/// `Σ‖w‖²` over weight tensors (biases and batch-norm entries excluded).
pub fn weight_norm_sq(params: &NetParams) -> f64 {
    params
        .entries
        .iter()
        .filter(|p| p.kind == ParamKind::Weight)
        .map(|p| p.value.sum_squares())
        .sum()
}

/// `−log softmax(logits)[label] + (weight_decay/2)·Σ‖w‖²`.
pub fn cross_entropy(logits: &[f64], label: usize, params: &NetParams, weight_decay: f64) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} >= class count {}",
            logits.len()
        )));
    }
    let mx = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
    let data = z.ln() + mx - logits[label];
    Ok(data + 0.5 * weight_decay * weight_norm_sq(params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay: f64,
    /// Steps between learning-rate decays; 0 disables decay.
    pub decay_interval: usize,
    pub step: usize,
    pub velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(params: &NetParams, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            decay: 1.0,
            decay_interval: 0,
            step: 0,
            velocity: params.entries.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// `v ← m·v + g (+ wd·θ for weights)`, `θ ← θ − lr·v`; running
    /// statistics are skipped. Every `decay_interval` steps the rate is
    /// multiplied by `decay`.
    pub fn apply(&mut self, params: &mut NetParams, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.entries.len() {
            return Err(Error::InvalidArgument("one gradient per parameter is required".into()));
        }
        for ((p, g), v) in params.entries.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.kind == ParamKind::Running {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd step",
                    expected: p.value.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            let wd = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            for ((th, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + gi + wd * *th;
                *th -= self.lr * *vi;
            }
        }
        self.step += 1;
        if self.decay_interval > 0 && self.step % self.decay_interval == 0 {
            self.lr *= self.decay;
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("sgd step"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub data: SynthConfig,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: f64,
    pub decay_epochs: usize,
    /// Stop after the first epoch whose test accuracy reaches this percent.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            data: SynthConfig::default(),
            train_per_class: 200,
            test_per_class: 50,
            epochs: 30,
            batch: 8,
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay: 0.96,
            decay_epochs: 10,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.data.validate()?;
        let n = &self.net;
        if (n.h, n.w, n.c) != (self.data.h, self.data.w, 1) || n.classes != self.data.classes.len() {
            return Err(Error::Config("network input does not match the data".into()));
        }
        if !n.appearance_only && n.t != self.data.t {
            return Err(Error::Config("network and data snippet lengths differ".into()));
        }
        if self.batch == 0 || self.epochs == 0 || self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("batch, epochs and split sizes must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub data_loss: f64,
    pub reg_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub params: NetParams,
    pub test_predictions: Vec<usize>,
    pub test_labels: Vec<usize>,
}

/// Input tensor for a batch: whole snippets, or for the appearance-only
/// baseline one frame per snippet chosen by `pick`.
fn batch_input(
    samples: &[&SnippetSample],
    cfg: &NetConfig,
    mut pick: impl FnMut(usize) -> usize,
) -> Result<Tensor> {
    let d = &samples[0].frames;
    let (t, fsz) = (d.shape()[0], d.len() / d.shape()[0]);
    let mut data = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if cfg.appearance_only {
            let f = pick(i);
            data.extend_from_slice(&s.frames.data()[f * fsz..(f + 1) * fsz]);
        } else {
            data.extend_from_slice(s.frames.data());
        }
    }
    let n = if cfg.appearance_only { samples.len() } else { samples.len() * t };
    Tensor::new(vec![n, cfg.h, cfg.w, cfg.c], data)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// Eval-mode predictions. The baseline sees one frame per snippet chosen
/// from `frame_seed`.
pub fn predict(
    cfg: &NetConfig,
    params: &NetParams,
    samples: &[SnippetSample],
    batch: usize,
    frame_seed: u64,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(samples.len());
    for (bi, chunk) in samples.chunks(batch.max(1)).enumerate() {
        let refs: Vec<&SnippetSample> = chunk.iter().collect();
        let x = batch_input(&refs, cfg, |i| {
            let t = refs[i].frames.shape()[0];
            XorShift64::new(hash_seed(&[frame_seed, (bi * batch + i) as u64])).below(t)
        })?;
        let mut g = Graph::new();
        let f = build_forward(&mut g, cfg, params, x, Mode::Eval)?;
        let c = cfg.classes;
        preds.extend(g.value(f.logits).data().chunks(c).map(argmax));
    }
    Ok(preds)
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    100.0 * pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// One optimizer step on a batch. Returns the mean data loss and the
/// number of correct train-mode predictions.
fn train_step(
    cfg: &NetConfig,
    params: &mut NetParams,
    opt: &mut SgdMomentum,
    x: Tensor,
    labels: &[usize],
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let f = build_forward(&mut g, cfg, params, x, Mode::Train)?;
    let loss = g.softmax_xent(f.logits, labels)?;
    let grads = g.backward(loss, &Tensor::scalar(1.0))?;
    let data_loss = g.value(loss).data()[0];
    if !data_loss.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let correct = g
        .value(f.logits)
        .data()
        .chunks(cfg.classes)
        .zip(labels)
        .filter(|(r, &l)| argmax(r) == l)
        .count();
    let gv: Vec<Tensor> = f.params.iter().map(|&v| grads.get(v)).collect();
    opt.apply(params, &gv)?;
    update_running_stats(params, &g, &f, cfg.bn_momentum);
    Ok((data_loss, correct))
}

/// Trains on freshly generated data. Fully determined by `cfg` and `seed`.
pub fn train_toy(cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_toy_with(cfg, seed, |_| {})
}

/// As [`train_toy`], calling `on_epoch` after every epoch.
pub fn train_toy_with(cfg: &TrainConfig, seed: u64, mut on_epoch: impl FnMut(&EpochStats)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.data, cfg.train_per_class, cfg.test_per_class, seed)?;
    let net = &cfg.net;
    let mut params = init_params(net, seed)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch);
    let mut opt = SgdMomentum::new(&params, cfg.lr, cfg.momentum);
    opt.weight_decay = cfg.weight_decay;
    opt.decay = cfg.lr_decay;
    opt.decay_interval = cfg.decay_epochs * steps_per_epoch;
    let test_labels: Vec<usize> = data.test.iter().map(|s| s.label).collect();
    let test_frame_seed = hash_seed(&[seed, 0x7E57]);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut test_predictions = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = XorShift64::new(hash_seed(&[seed, 0xE90C, epoch as u64]));
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch) {
            let refs: Vec<&SnippetSample> = idx.iter().map(|&i| &data.train[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
            let x = batch_input(&refs, net, |_| rng.below(cfg.data.t))?;
            let (l, c) = train_step(net, &mut params, &mut opt, x, &labels)?;
            loss_sum += l * idx.len() as f64;
            correct += c;
        }
        test_predictions = predict(net, &params, &data.test, cfg.batch, test_frame_seed)?;
        let stats = EpochStats {
            epoch: epoch + 1,
            data_loss: loss_sum / data.train.len() as f64,
            reg_loss: 0.5 * cfg.weight_decay * weight_norm_sq(&params),
            train_acc: 100.0 * correct as f64 / data.train.len() as f64,
            test_acc: accuracy(&test_predictions, &test_labels),
        };
        on_epoch(&stats);
        history.push(stats);
        if cfg.stop_at.is_some_and(|t| stats.test_acc >= t) {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        params,
        test_predictions,
        test_labels,
    })
}

pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,data_loss,reg_loss,train_acc,test_acc")?;
    for h in history {
        writeln!(
            f,
            "{},{:.10},{:.10},{:.4},{:.4}",
            h.epoch, h.data_loss, h.reg_loss, h.train_acc, h.test_acc
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Finite-difference check of the whole network in training mode, with the
/// input frames and every trainable tensor as leaves. Offset-learner
/// kernels are set small and their biases to fractional values so every
/// sampling point stays away from the integer lattice.
pub fn network_gradcheck(cfg: &NetConfig, seed: u64, eps: f64, max_coords: usize) -> Result<Vec<(String, LeafCheck)>> {
    let mut params = init_params(cfg, seed)?;
    let mut rng = XorShift64::new(hash_seed(&[seed, 0x6C]));
    for p in &mut params.entries {
        if p.name.ends_with(".phi") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.range(-0.002, 0.002));
        } else if p.name.ends_with(".phi_b") {
            let pat = [0.37, 0.61];
            p.value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = pat[i % 2]);
        } else if p.kind == ParamKind::Norm || p.kind == ParamKind::Bias {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.range(-0.1, 0.1));
        }
    }
    let t = if cfg.appearance_only { 1 } else { cfg.t };
    let frames = Tensor::from_fn(&[2 * t, cfg.h, cfg.w, cfg.c], |_| rng.uniform());
    let labels: Vec<usize> = (0..2).map(|i| i % cfg.classes).collect();
    let mut leaves: Vec<Tensor> = params.entries.iter().map(|p| p.value.clone()).collect();
    leaves.push(frames);
    let build = |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let (pv, x) = v.split_at(params.entries.len());
        let f = build_forward_with(g, cfg, &params, pv.to_vec(), x[0], Mode::Train)?;
        g.softmax_xent(f.logits, &labels)
    };
    let report = finite_diff_check(build, &leaves, CheckLoss::Identity, eps, Some(max_coords))?;
    let mut named = Vec::new();
    for (i, r) in report.into_iter().enumerate() {
        let name = match params.entries.get(i) {
            Some(p) if p.kind == ParamKind::Running => continue,
            Some(p) => p.name.clone(),
            None => "input".to_string(),
        };
        named.push((name, r));
    }
    Ok(named)
}
