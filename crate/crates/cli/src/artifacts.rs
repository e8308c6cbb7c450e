//! Subcommands that read or write data files.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use lcdc::metrics::{edit_score, f1_at_k, frame_accuracy};
use lcdc::motion::{energy_map, write_energy_pgm, write_motion_ppm, MotionField};
use lcdc::network::{frame_offsets, load_checkpoint, save_checkpoint};
use lcdc::synthdata::{
    export_snippets, generate_sequence, generate_snippet, sample_seed, write_label_csv, MotionClass,
    SequenceConfig, SynthConfig,
};
use lcdc::train::{train_toy_with, write_history_csv};
use lcdc::Tensor;

use crate::{read_train_config, EvalArgs, GenArgs, MotionArgs, TrainArgs};

/// Percentages with at most two decimals and no trailing zeros.
fn pct(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn load_frames(paths: &[impl AsRef<Path>]) -> Result<Tensor> {
    let mut frames = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let t = Tensor::load(p).with_context(|| format!("reading {}", p.display()))?;
        match t.rank() {
            3 => frames.push(t),
            4 => {
                for i in 0..t.shape()[0] {
                    frames.push(t.slice_outer(i)?);
                }
            }
            _ => bail!("{}: expected HxWxC or TxHxWxC, got {:?}", p.display(), t.shape()),
        }
    }
    Ok(Tensor::stack(&frames)?)
}

pub fn motion(a: &MotionArgs) -> Result<bool> {
    let (cfg, params) = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let frames = load_frames(&a.frames)?;
    let n = frames.shape()[0];
    ensure!(n >= 2, "motion needs at least two frames, got {n}");
    let offsets = frame_offsets(&frames, &params, &cfg)?;
    if offsets.iter().any(|o| o.shape()[3] != 2) {
        bail!("motion export needs one shared offset field per block; this checkpoint has dense offsets");
    }
    fs::create_dir_all(&a.out)?;
    let mut norm = Vec::new();
    let mut per_step: Vec<Vec<MotionField>> = vec![Vec::new(); n - 1];
    println!("step,block,mean_dr,mean_dc,max_len");
    for (k, off) in offsets.iter().enumerate() {
        off.save(a.out.join(format!("offsets_block{k}.tsr")))?;
        let mut stacked = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            let m = MotionField::new(off.slice_outer(t + 1)?.sub(&off.slice_outer(t)?)?)?;
            let file = format!("motion_block{k}_t{t:03}.ppm");
            let max = write_motion_ppm(&m, a.suppress, a.out.join(&file))?;
            norm.push((file, max));
            let d = m.tensor().data();
            let cells = (d.len() / 2) as f64;
            let mean_r = d.iter().step_by(2).sum::<f64>() / cells;
            let mean_c = d.iter().skip(1).step_by(2).sum::<f64>() / cells;
            println!("{t},{k},{mean_r:e},{mean_c:e},{max:e}");
            stacked.push(m.tensor().clone());
            per_step[t].push(m);
        }
        Tensor::stack(&stacked)?.save(a.out.join(format!("motion_block{k}.tsr")))?;
    }
    for (t, fields) in per_step.iter().enumerate() {
        let file = format!("energy_t{t:03}.pgm");
        let max = write_energy_pgm(&energy_map(fields)?, a.out.join(&file))?;
        norm.push((file, max));
    }
    let mut f = fs::File::create(a.out.join("normalization.csv"))?;
    writeln!(f, "file,max")?;
    for (file, max) in &norm {
        writeln!(f, "{file},{max:e}")?;
    }
    eprintln!("wrote {} images to {}", norm.len(), a.out.display());
    Ok(true)
}

fn read_synth_config(a: &GenArgs) -> Result<SynthConfig> {
    match &a.config {
        None => Ok(SynthConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

pub fn gen(a: &GenArgs) -> Result<bool> {
    let cfg = read_synth_config(a)?;
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    if a.sequence {
        let s = generate_sequence(
            a.seed,
            &SequenceConfig {
                segments: a.segments,
                min_len: a.min_len,
                max_len: a.max_len,
                snippet: cfg.clone(),
            },
        )?;
        s.frames.save(a.out.join("frames.tsr"))?;
        write_label_csv(&a.out.join("labels.csv"), &s.frame_labels)?;
        let mut f = fs::File::create(a.out.join("segments.csv"))?;
        writeln!(f, "label,class,start,end")?;
        for seg in &s.segments {
            writeln!(f, "{},{},{},{}", seg.label, cfg.classes[seg.label], seg.start, seg.end)?;
        }
        println!("frames={}", s.frame_labels.len());
        println!("segments={}", s.segments.len());
        return Ok(true);
    }
    let classes: Vec<MotionClass> = match &a.class {
        Some(name) => vec![name.parse().map_err(|e| anyhow::anyhow!("{e}"))?],
        None => cfg.classes.clone(),
    };
    let mut samples = Vec::with_capacity(classes.len() * a.count);
    for &class in &classes {
        let label = cfg.class_index(class)?;
        for i in 0..a.count {
            samples.push(generate_snippet(class, sample_seed(a.seed, a.split, label, i), &cfg)?);
        }
    }
    export_snippets(&a.out, &samples, &cfg)?;
    println!("samples={}", samples.len());
    println!("frames_per_sample={}", cfg.t);
    Ok(true)
}

pub fn train(a: &TrainArgs) -> Result<bool> {
    let mut cfg = read_train_config(a.config.as_ref())?;
    if a.baseline {
        cfg.net.appearance_only = true;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.stop_at.is_some() {
        cfg.stop_at = a.stop_at;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.echo.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    let out = train_toy_with(&cfg, a.seed, |s| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train {:>6.2}%  test {:>6.2}%",
            s.epoch,
            s.data_loss + s.reg_loss,
            s.train_acc,
            s.test_acc
        );
    })?;
    write_history_csv(&a.out.join("history.csv"), &out.history)?;
    save_checkpoint(&a.out.join("checkpoint"), &cfg.net, &out.params)?;
    write_label_csv(&a.out.join("test_pred.csv"), &out.test_predictions)?;
    write_label_csv(&a.out.join("test_gt.csv"), &out.test_labels)?;
    let last = out.history.last().context("no epoch was run")?;
    let best = out.history.iter().map(|h| h.test_acc).fold(0.0, f64::max);
    println!("epochs_run={}", out.history.len());
    println!("final_train_acc={}", pct(last.train_acc));
    println!("final_test_acc={}", pct(last.test_acc));
    println!("best_test_acc={}", pct(best));
    Ok(true)
}

/// Label column of a CSV file: the `label` column when the header has one,
/// otherwise the last column.
fn read_labels(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let col = headers.iter().position(|h| h == "label").unwrap_or(headers.len().saturating_sub(1));
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        let v = rec.get(col).with_context(|| format!("{}: short row", path.display()))?;
        labels.push(v.to_string());
    }
    Ok(labels)
}

pub fn eval(a: &EvalArgs) -> Result<bool> {
    let pred = read_labels(&a.pred)?;
    let gt = read_labels(&a.gt)?;
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut id_of = |s: &str| {
        let next = ids.len();
        *ids.entry(s.to_string()).or_insert(next)
    };
    let g: Vec<usize> = gt.iter().map(|s| id_of(s)).collect();
    let p: Vec<usize> = pred.iter().map(|s| id_of(s)).collect();
    let background = match (&a.background, a.include_background) {
        (Some(b), false) => Some(id_of(b)),
        _ => None,
    };
    let acc = frame_accuracy(&p, &g)?;
    let edit = edit_score(&p, &g, background);
    let mut header = vec!["acc".to_string(), "edit".to_string()];
    let mut row = vec![pct(acc), pct(edit)];
    for &k in &a.k {
        header.push(format!("f1@{}", pct(k)));
        row.push(pct(f1_at_k(&p, &g, k, background)?));
    }
    println!("{}", header.join(","));
    println!("{}", row.join(","));
    Ok(true)
}
