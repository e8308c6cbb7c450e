//! Synthetic moving-texture snippets whose classes differ only in motion.
//!
//! The world is a torus of `H×W` pixels. A static background texture fills
//! it and a soft-edged textured disk sits on top. Depending on the class the
//! disk translates by `speed` pixels per frame or spins in place. Start
//! position, textures and phases depend only on the seed, so frame 0 is the
//! same for every class and any single frame is uninformative about the
//! label.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{hash_seed, XorShift64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionClass {
    Up,
    Down,
    Left,
    Right,
    Cw,
    Ccw,
}

impl MotionClass {
    pub const TRANSLATIONS: [MotionClass; 4] = [Self::Up, Self::Down, Self::Left, Self::Right];
    pub const ALL: [MotionClass; 6] = [
        Self::Up,
        Self::Down,
        Self::Left,
        Self::Right,
        Self::Cw,
        Self::Ccw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Up => "up",
            Self::Down => "down",
            Self::Left => "left",
            Self::Right => "right",
            Self::Cw => "cw",
            Self::Ccw => "ccw",
        }
    }

    /// Per-frame displacement (row, col) for translation classes.
    fn step(self, speed: f64) -> (f64, f64) {
        match self {
            Self::Up => (-speed, 0.0),
            Self::Down => (speed, 0.0),
            Self::Left => (0.0, -speed),
            Self::Right => (0.0, speed),
            Self::Cw | Self::Ccw => (0.0, 0.0),
        }
    }
}

impl fmt::Display for MotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown motion class {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Wavelength of the textures in pixels.
    pub texture_scale: f64,
    /// Pixels per frame for translations; rim pixels per frame for spins.
    pub speed: f64,
    pub blob_radius: f64,
    pub background: bool,
    pub classes: Vec<MotionClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t: 16,
            h: 32,
            w: 32,
            texture_scale: 6.0,
            speed: 2.0,
            blob_radius: 7.0,
            background: true,
            classes: MotionClass::TRANSLATIONS.to_vec(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Config("snippet extents must be positive".into()));
        }
        if !(self.speed >= 0.0 && self.speed < self.texture_scale) {
            return Err(Error::Config(format!(
                "speed {} must be below the texture scale {}",
                self.speed, self.texture_scale
            )));
        }
        if !(self.blob_radius > 0.0) || 2.0 * self.blob_radius >= self.h.min(self.w) as f64 {
            return Err(Error::Config("blob must fit inside the frame".into()));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("at least one class is required".into()));
        }
        Ok(())
    }

    pub fn class_index(&self, c: MotionClass) -> Result<usize> {
        self.classes
            .iter()
            .position(|&k| k == c)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} not in the configured set")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnippetSample {
    /// `T×H×W×1`, values in `[0, 1]`.
    pub frames: Tensor,
    pub label: usize,
    pub class: MotionClass,
    pub seed: u64,
}

/// Sum of random plane waves; `wavelength` sets the dominant scale.
struct Texture {
    waves: Vec<(f64, f64, f64)>,
}

impl Texture {
    const WAVES: usize = 6;

    fn random(rng: &mut XorShift64, wavelength: f64) -> Self {
        let waves = (0..Self::WAVES)
            .map(|_| {
                let ang = rng.range(0.0, 2.0 * PI);
                let k = 2.0 * PI / (wavelength * rng.range(0.8, 1.25));
                (k * ang.cos(), k * ang.sin(), rng.range(0.0, 2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    /// Periodic variant: wave vectors are snapped to whole cycles per
    /// `h×w` tile so the texture wraps seamlessly.
    fn periodic(rng: &mut XorShift64, wavelength: f64, h: usize, w: usize) -> Self {
        let mut t = Self::random(rng, wavelength);
        for wave in &mut t.waves {
            let cr = (wave.0 * h as f64 / (2.0 * PI)).round();
            let cc = (wave.1 * w as f64 / (2.0 * PI)).round();
            wave.0 = 2.0 * PI * cr / h as f64;
            wave.1 = 2.0 * PI * cc / w as f64;
        }
        t
    }

    fn at(&self, r: f64, c: f64) -> f64 {
        let s: f64 = self.waves.iter().map(|&(kr, kc, ph)| (kr * r + kc * c + ph).cos()).sum();
        (0.5 + 0.5 * s / (Self::WAVES as f64).sqrt()).clamp(0.0, 1.0)
    }
}

/// Signed shortest displacement on a ring of length `n`.
fn wrap(d: f64, n: usize) -> f64 {
    let n = n as f64;
    d - n * (d / n).round()
}

/// Generates one snippet. Everything except the motion is a function of
/// `seed` alone.
pub fn generate_snippet(class: MotionClass, seed: u64, cfg: &SynthConfig) -> Result<SnippetSample> {
    cfg.validate()?;
    let label = cfg.class_index(class)?;
    let mut rng = XorShift64::new(seed);
    let bg = Texture::periodic(&mut rng, cfg.texture_scale, cfg.h, cfg.w);
    let fg = Texture::random(&mut rng, cfg.texture_scale);
    let start = (rng.range(0.0, cfg.h as f64), rng.range(0.0, cfg.w as f64));
    let bg_gain = if cfg.background { 1.0 } else { 0.0 };
    let (dr, dc) = class.step(cfg.speed);
    let spin = match class {
        MotionClass::Cw => cfg.speed / cfg.blob_radius,
        MotionClass::Ccw => -cfg.speed / cfg.blob_radius,
        _ => 0.0,
    };
    let (h, w, r0) = (cfg.h, cfg.w, cfg.blob_radius);
    let mut data = Vec::with_capacity(cfg.t * h * w);
    for t in 0..cfg.t {
        let centre = (start.0 + dr * t as f64, start.1 + dc * t as f64);
        let (sin, cos) = (spin * t as f64).sin_cos();
        for r in 0..h {
            for c in 0..w {
                let u = wrap(r as f64 - centre.0, h);
                let v = wrap(c as f64 - centre.1, w);
                let alpha = (r0 + 0.5 - (u * u + v * v).sqrt()).clamp(0.0, 1.0);
                let back = bg_gain * bg.at(r as f64, c as f64);
                let val = if alpha > 0.0 {
                    // Rotate the query back into the blob's own frame.
                    let (ur, vr) = (cos * u + sin * v, -sin * u + cos * v);
                    alpha * fg.at(ur, vr) + (1.0 - alpha) * back
                } else {
                    back
                };
                data.push(val);
            }
        }
    }
    Ok(SnippetSample {
        frames: Tensor::new(vec![cfg.t, h, w, 1], data)?,
        label,
        class,
        seed,
    })
}

/// Seed for sample `index` of `class` in split `split` (0 train, 1 test).
pub fn sample_seed(base: u64, split: u64, class: usize, index: usize) -> u64 {
    hash_seed(&[base, split, class as u64, index as u64])
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SnippetSample>,
    pub test: Vec<SnippetSample>,
}

/// Builds a class-balanced train/test split; samples are ordered by class
/// then index.
pub fn generate_dataset(
    cfg: &SynthConfig,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate()?;
    let split = |s: u64, per: usize| -> Result<Vec<SnippetSample>> {
        let jobs: Vec<(usize, usize)> = (0..cfg.classes.len())
            .flat_map(|c| (0..per).map(move |i| (c, i)))
            .collect();
        jobs.par_iter()
            .map(|&(c, i)| generate_snippet(cfg.classes[c], sample_seed(seed, s, c, i), cfg))
            .collect()
    };
    Ok(Dataset {
        train: split(0, train_per_class)?,
        test: split(1, test_per_class)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

/// Maximal runs of equal labels.
pub fn segments_of(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.end = i + 1,
            _ => out.push(Segment {
                label: l,
                start: i,
                end: i + 1,
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub segments: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub snippet: SynthConfig,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            segments: 8,
            min_len: 6,
            max_len: 20,
            snippet: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SequenceSample {
    /// `N×H×W×1` for `N` total frames.
    pub frames: Tensor,
    pub frame_labels: Vec<usize>,
    pub segments: Vec<Segment>,
}

/// Concatenates snippets of random length; neighbouring segments always
/// have different classes.
pub fn generate_sequence(seed: u64, cfg: &SequenceConfig) -> Result<SequenceSample> {
    if cfg.segments == 0 || cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config("invalid segment count or length range".into()));
    }
    let n_classes = cfg.snippet.classes.len();
    if n_classes < 2 && cfg.segments > 1 {
        return Err(Error::Config("consecutive segments need two classes".into()));
    }
    let mut rng = XorShift64::new(hash_seed(&[seed, 0x5E9]));
    let mut frames = Vec::new();
    let mut labels = Vec::new();
    let mut segments = Vec::with_capacity(cfg.segments);
    let mut prev: Option<usize> = None;
    for k in 0..cfg.segments {
        let mut label = rng.below(n_classes);
        if prev == Some(label) {
            label = (label + 1 + rng.below(n_classes - 1)) % n_classes;
        }
        let len = cfg.min_len + rng.below(cfg.max_len - cfg.min_len + 1);
        let snippet_cfg = SynthConfig {
            t: len,
            ..cfg.snippet.clone()
        };
        let s = generate_snippet(
            cfg.snippet.classes[label],
            hash_seed(&[seed, k as u64]),
            &snippet_cfg,
        )?;
        segments.push(Segment {
            label,
            start: labels.len(),
            end: labels.len() + len,
        });
        labels.extend(std::iter::repeat_n(label, len));
        frames.extend_from_slice(s.frames.data());
        prev = Some(label);
    }
    let (h, w) = (cfg.snippet.h, cfg.snippet.w);
    Ok(SequenceSample {
        frames: Tensor::new(vec![labels.len(), h, w, 1], frames)?,
        frame_labels: labels,
        segments,
    })
}

/// Writes `frame,label` rows with a header line.
pub fn write_label_csv(path: &Path, labels: &[usize]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "frame,label")?;
    for (i, l) in labels.iter().enumerate() {
        writeln!(f, "{i},{l}")?;
    }
    f.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct ManifestEntry<'a> {
    file: String,
    class: &'a str,
    label: usize,
    seed: u64,
}

/// Saves snippets as `sample_XXXX.tsr` plus `manifest.json` in `dir`.
pub fn export_snippets(dir: &Path, samples: &[SnippetSample], cfg: &SynthConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("sample_{i:04}.tsr");
        s.frames.save(&dir.join(&file))?;
        entries.push(ManifestEntry {
            file,
            class: s.class.name(),
            label: s.label,
            seed: s.seed,
        });
    }
    let manifest = serde_json::json!({ "config": cfg, "samples": entries });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circular_centroid(frame: &[f64], h: usize, w: usize) -> (f64, f64) {
        let (mut rs, mut rc, mut cs, mut cc) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let m = frame[r * w + c];
                let (ar, ac) = (2.0 * PI * r as f64 / h as f64, 2.0 * PI * c as f64 / w as f64);
                rs += m * ar.sin();
                rc += m * ar.cos();
                cs += m * ac.sin();
                cc += m * ac.cos();
            }
        }
        (
            rs.atan2(rc) * h as f64 / (2.0 * PI),
            cs.atan2(cc) * w as f64 / (2.0 * PI),
        )
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::default();
        let a = generate_snippet(MotionClass::Left, 99, &cfg).unwrap();
        let b = generate_snippet(MotionClass::Left, 99, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn right_moves_centroid_by_speed() {
        let cfg = SynthConfig {
            background: false,
            ..SynthConfig::default()
        };
        for seed in 0..5 {
            let s = generate_snippet(MotionClass::Right, seed, &cfg).unwrap();
            let fsz = cfg.h * cfg.w;
            let cents: Vec<_> = (0..cfg.t)
                .map(|t| circular_centroid(&s.frames.data()[t * fsz..(t + 1) * fsz], cfg.h, cfg.w))
                .collect();
            for pair in cents.windows(2) {
                let dc = wrap(pair[1].1 - pair[0].1, cfg.w);
                let dr = wrap(pair[1].0 - pair[0].0, cfg.h);
                assert!((dc - cfg.speed).abs() <= 0.1, "seed {seed}: dc {dc}");
                assert!(dr.abs() <= 0.1);
            }
        }
    }

    #[test]
    fn frame_zero_shared_across_classes() {
        let cfg = SynthConfig {
            classes: MotionClass::ALL.to_vec(),
            ..SynthConfig::default()
        };
        let fsz = cfg.h * cfg.w;
        let up = generate_snippet(MotionClass::Up, 5, &cfg).unwrap();
        for c in MotionClass::ALL {
            let s = generate_snippet(c, 5, &cfg).unwrap();
            assert_eq!(&s.frames.data()[..fsz], &up.frames.data()[..fsz]);
            if c != MotionClass::Up {
                assert_ne!(&s.frames.data()[fsz..2 * fsz], &up.frames.data()[fsz..2 * fsz]);
            }
        }
        assert!(up.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig {
            speed: 7.0,
            ..SynthConfig::default()
        };
        assert!(generate_snippet(MotionClass::Up, 0, &cfg).is_err());
        let cfg = SynthConfig::default();
        assert!(generate_snippet(MotionClass::Cw, 0, &cfg).is_err());
        assert!("sideways".parse::<MotionClass>().is_err());
        assert_eq!("ccw".parse::<MotionClass>().unwrap(), MotionClass::Ccw);
    }

    #[test]
    fn sequence_segments_round_trip() {
        let cfg = SequenceConfig {
            snippet: SynthConfig {
                h: 16,
                w: 16,
                blob_radius: 4.0,
                ..SynthConfig::default()
            },
            ..SequenceConfig::default()
        };
        let s = generate_sequence(3, &cfg).unwrap();
        assert_eq!(segments_of(&s.frame_labels), s.segments);
        let total: usize = s.segments.iter().map(|g| g.end - g.start).sum();
        assert_eq!(total, s.frames.shape()[0]);
        assert_eq!(total, s.frame_labels.len());
    }

    #[test]
    fn dataset_is_balanced_and_reproducible() {
        let cfg = SynthConfig {
            t: 3,
            ..SynthConfig::default()
        };
        let a = generate_dataset(&cfg, 2, 1, 7).unwrap();
        let b = generate_dataset(&cfg, 2, 1, 7).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.test.len(), 4);
        assert_eq!(a.train, b.train);
        let labels: Vec<usize> = a.train.iter().map(|s| s.label).collect();
        assert_eq!(labels, [0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
