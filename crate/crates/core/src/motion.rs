//! Motion in feature space: temporal differences of offset fields, motion
//! energy maps, and a constructive check of the optical-flow equivalence of
//! LCDC offsets.
//!
//! For a deformable convolution the adaptive receptive field at time `t` is
//! `n + k + Δ̈ᵗ[n, k]`; its temporal difference is `Δ̈ᵗ − Δ̈ᵗ⁻¹` because the
//! grid positions cancel. LCDC gives one vector per location instead,
//! `ṙᵗ = Δ̇ᵗ − Δ̇ᵗ⁻¹`. If consecutive inputs satisfy `xᵗ(s) = xᵗ⁻¹(s − o(s))`
//! then the two LCDC outputs agree exactly when `ṙᵗ[n] = o(n + Δ̇ᵗ[n])`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::conv::{Bilinear, KernelSpec};
use crate::deform::{lcdc_conv2d, DenseOffsets, LocalOffsets};
use crate::error::{shape_mismatch, Error, Result};
use crate::tensor::Tensor;

/// Per-location displacement between consecutive time steps (`H×W×2`).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    field: Tensor,
}

impl MotionField {
    pub fn new(field: Tensor) -> Result<Self> {
        match field.shape() {
            [_, _, 2] => {}
            s => return Err(shape_mismatch("MotionField", &[0, 0, 2], s)),
        }
        Ok(Self {
            field: field.ensure_finite("MotionField")?,
        })
    }

    pub fn constant(h: usize, w: usize, v: (f64, f64)) -> Self {
        Self {
            field: LocalOffsets::constant(h, w, v).into_tensor(),
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

    /// The field value shared by every location, if there is one.
    pub fn as_constant(&self) -> Option<(f64, f64)> {
        let v = self.at(0, 0);
        self.field
            .data()
            .chunks_exact(2)
            .all(|p| p[0] == v.0 && p[1] == v.1)
            .then_some(v)
    }

    /// Bilinear evaluation at a fractional point with edge clamping, so a
    /// constant field stays constant everywhere.
    pub fn sample(&self, r: f64, c: f64) -> (f64, f64) {
        let (h, w) = self.extents();
        let bl = Bilinear::new(
            h,
            w,
            r.clamp(0.0, (h - 1) as f64),
            c.clamp(0.0, (w - 1) as f64),
        );
        (
            bl.sample(self.field.data(), 2, 0),
            bl.sample(self.field.data(), 2, 1),
        )
    }
}

/// `r̈ = Δ̈ᵗ − Δ̈ᵗ⁻¹`, elementwise (`H×W×G×K×2`).
pub fn receptive_field_diff(current: &DenseOffsets, previous: &DenseOffsets) -> Result<Tensor> {
    current.tensor().sub(previous.tensor())
}

/// `ṙ = Δ̇ᵗ − Δ̇ᵗ⁻¹`.
pub fn local_motion(current: &LocalOffsets, previous: &LocalOffsets) -> Result<MotionField> {
    MotionField::new(current.tensor().sub(previous.tensor())?)
}

/// Per-location sum over layers of the motion-vector length.
///
/// Fields of different extents are brought to the finest grid (largest
/// height and width) by nearest-neighbour upsampling before summation.
pub fn energy_map(motions: &[MotionField]) -> Result<Tensor> {
    if motions.is_empty() {
        return Err(Error::InvalidArgument(
            "energy map needs at least one motion field".into(),
        ));
    }
    let h = motions.iter().map(|m| m.extents().0).max().unwrap_or(1);
    let w = motions.iter().map(|m| m.extents().1).max().unwrap_or(1);
    let mut out = Tensor::zeros(&[h, w]);
    for m in motions {
        let (mh, mw) = m.extents();
        for r in 0..h {
            let sr = r * mh / h;
            for c in 0..w {
                let sc = c * mw / w;
                let (a, b) = m.at(sr, sc);
                out.data_mut()[r * w + c] += a.hypot(b);
            }
        }
    }
    Ok(out)
}

/// Image whose channel `i` is `a + b·row + c·col + d·row·col` with
/// `coeffs[i] = [a, b, c, d]`. Bilinear sampling reproduces such images
/// exactly away from the border.
pub fn multilinear_image(h: usize, w: usize, coeffs: &[[f64; 4]]) -> Tensor {
    Tensor::from_fn(&[h, w, coeffs.len()], |i| {
        let [a, b, c, d] = coeffs[i[2]];
        let (u, v) = (i[0] as f64, i[1] as f64);
        a + b * u + c * v + d * u * v
    })
}

/// Outcome of [`check_proposition1`].
#[derive(Debug, Clone, PartialEq)]
pub struct Prop1Report {
    /// Largest `|yᵗ − yᵗ⁻¹|` over compared output locations.
    pub max_output_gap: f64,
    /// Largest `|ṙ[n] − o(n + Δ̇ᵗ[n])|` over all locations.
    pub max_motion_gap: f64,
    /// Number of output locations whose sampling footprint is exact.
    pub compared: usize,
    pub pass: bool,
}

/// Warps `x` by the motion `o`: `xᵗ[q] = x(q − o(q))`.
pub fn translate_by_motion(x: &Tensor, o: &MotionField) -> Result<Tensor> {
    let &[h, w, ch] = x.shape() else {
        return Err(Error::InvalidArgument(format!(
            "expected an HxWxC map, got {:?}",
            x.shape()
        )));
    };
    if o.extents() != (h, w) {
        return Err(shape_mismatch("translate_by_motion", &[h, w, 2], o.tensor().shape()));
    }
    let mut out = Tensor::zeros(&[h, w, ch]);
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = o.at(r, c);
            let bl = Bilinear::new(h, w, r as f64 - dr, c as f64 - dc);
            for i in 0..ch {
                out.data_mut()[(r * w + c) * ch + i] = bl.sample(x.data(), ch, i);
            }
        }
    }
    Ok(out)
}

/// Solves `Δ̇ᵗ[n] = Δ̇ᵗ⁻¹[n] + o(n + Δ̇ᵗ[n])`. Constant motion has the closed
/// form `Δ̇ᵗ = Δ̇ᵗ⁻¹ + o`; otherwise the relation is iterated to a fixed point.
pub fn encoded_offsets(previous: &LocalOffsets, o: &MotionField) -> Result<LocalOffsets> {
    let (h, w) = previous.extents();
    if o.extents() != (h, w) {
        return Err(shape_mismatch("encoded_offsets", &[h, w, 2], o.tensor().shape()));
    }
    if let Some(v) = o.as_constant() {
        return LocalOffsets::new(previous.tensor().map(|x| x).zip_map(
            &LocalOffsets::constant(h, w, v).into_tensor(),
            |a, b| a + b,
        )?);
    }
    let mut cur = previous.tensor().clone();
    for _ in 0..200 {
        let mut next = cur.clone();
        let mut change: f64 = 0.0;
        for r in 0..h {
            for c in 0..w {
                let i = (r * w + c) * 2;
                let p = previous.tensor().data();
                let d = cur.data();
                let (orow, ocol) = o.sample(r as f64 + d[i], c as f64 + d[i + 1]);
                let nv = [p[i] + orow, p[i + 1] + ocol];
                change = change.max((nv[0] - d[i]).abs()).max((nv[1] - d[i + 1]).abs());
                next.data_mut()[i] = nv[0];
                next.data_mut()[i + 1] = nv[1];
            }
        }
        cur = next;
        if change <= 1e-15 {
            break;
        }
    }
    LocalOffsets::new(cur)
}

fn exact_box(h: usize, w: usize, r: f64, c: f64) -> bool {
    r >= 0.0 && c >= 0.0 && r <= (h - 1) as f64 && c <= (w - 1) as f64
}

/// Compares the LCDC outputs of `(x_prev, Δ̇_prev)` and `(x_t, Δ̇_t)` where
/// `x_t` is `x_prev` warped by `o`, at every output location whose sampling
/// footprint is reproduced exactly by bilinear interpolation.
pub fn compare_lcdc_outputs(
    x_prev: &Tensor,
    o: &MotionField,
    prev: &LocalOffsets,
    current: &LocalOffsets,
    w: &Tensor,
    spec: &KernelSpec,
    tol: f64,
) -> Result<Prop1Report> {
    if w.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Hypothesis("kernel is identically zero".into()));
    }
    let &[h, wd, _] = x_prev.shape() else {
        return Err(Error::InvalidArgument(format!(
            "expected an HxWxC map, got {:?}",
            x_prev.shape()
        )));
    };
    let x_t = translate_by_motion(x_prev, o)?;
    let y_prev = lcdc_conv2d(x_prev, w, prev, spec)?;
    let y_t = lcdc_conv2d(&x_t, w, current, spec)?;

    // Grid points of x_t that were themselves sampled exactly.
    let valid_t: Vec<bool> = (0..h * wd)
        .map(|q| {
            let (dr, dc) = o.at(q / wd, q % wd);
            exact_box(h, wd, (q / wd) as f64 - dr, (q % wd) as f64 - dc)
        })
        .collect();
    let exact_t = |r: f64, c: f64| {
        if !exact_box(h, wd, r, c) {
            return false;
        }
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let r1 = if r > r0 as f64 { r0 + 1 } else { r0 };
        let c1 = if c > c0 as f64 { c0 + 1 } else { c0 };
        [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
            .iter()
            .all(|&(a, b)| valid_t[a * wd + b])
    };

    let (oh, ow) = (y_t.shape()[0], y_t.shape()[1]);
    let co = spec.out_channels;
    let mut gap: f64 = 0.0;
    let mut compared = 0;
    for y in 0..oh {
        'loc: for xo in 0..ow {
            for a in 0..spec.kh {
                for b in 0..spec.kw {
                    let (mr, mc) = spec.input_pos(y, xo, a, b);
                    if mr < 0 || mc < 0 || mr as usize >= h || mc as usize >= wd {
                        continue;
                    }
                    let (pr, pc) = prev.at(mr as usize, mc as usize);
                    let (tr, tc) = current.at(mr as usize, mc as usize);
                    if !exact_box(h, wd, mr as f64 + pr, mc as f64 + pc)
                        || !exact_t(mr as f64 + tr, mc as f64 + tc)
                    {
                        continue 'loc;
                    }
                }
            }
            compared += 1;
            for j in 0..co {
                let i = (y * ow + xo) * co + j;
                gap = gap.max((y_t.data()[i] - y_prev.data()[i]).abs());
            }
        }
    }
    if compared == 0 {
        return Err(Error::InvalidArgument(
            "no output location has an exact sampling footprint; enlarge the grid".into(),
        ));
    }

    let (fh, fw) = current.extents();
    let mut motion_gap: f64 = 0.0;
    for r in 0..fh {
        for c in 0..fw {
            let (tr, tc) = current.at(r, c);
            let (pr, pc) = prev.at(r, c);
            let (or, oc) = o.sample(r as f64 + tr, c as f64 + tc);
            motion_gap = motion_gap
                .max(((tr - pr) - or).abs())
                .max(((tc - pc) - oc).abs());
        }
    }
    Ok(Prop1Report {
        max_output_gap: gap,
        max_motion_gap: motion_gap,
        compared,
        pass: gap <= tol && motion_gap <= tol,
    })
}

/// Builds `xᵗ` from `xᵗ⁻¹` and `o`, sets `Δ̇ᵗ` by the encoded-motion
/// relation, and reports how far the two LCDC outputs and the recovered
/// motion are from agreement.
pub fn check_proposition1(
    x_prev: &Tensor,
    o: &MotionField,
    prev: &LocalOffsets,
    w: &Tensor,
    spec: &KernelSpec,
    tol: f64,
) -> Result<Prop1Report> {
    if w.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Hypothesis("kernel is identically zero".into()));
    }
    let current = encoded_offsets(prev, o)?;
    compare_lcdc_outputs(x_prev, o, prev, &current, w, spec, tol)
}

/// Writes `energy` as a 16-bit binary PGM scaled so the maximum maps to
/// 65535. Returns the maximum used for scaling.
pub fn write_energy_pgm(energy: &Tensor, path: impl AsRef<Path>) -> Result<f64> {
    let &[h, w] = energy.shape() else {
        return Err(Error::InvalidArgument("energy map must be HxW".into()));
    };
    let max = energy.data().iter().fold(0.0f64, |m, &v| m.max(v));
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &v in energy.data() {
        let q = if max > 0.0 {
            (v / max * 65535.0).round() as u16
        } else {
            0
        };
        out.write_all(&q.to_be_bytes())?;
    }
    out.flush()?;
    Ok(max)
}

/// Writes a motion field as a binary PPM: hue encodes direction, value
/// encodes length relative to the longest vector. Vectors shorter than
/// `suppress` are drawn black. Returns the maximum length.
pub fn write_motion_ppm(m: &MotionField, suppress: f64, path: impl AsRef<Path>) -> Result<f64> {
    let (h, w) = m.extents();
    let max = m
        .tensor()
        .data()
        .chunks_exact(2)
        .fold(0.0f64, |acc, p| acc.max(p[0].hypot(p[1])));
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    for r in 0..h {
        for c in 0..w {
            let (dr, dc) = m.at(r, c);
            let mag = dr.hypot(dc);
            let rgb = if mag < suppress || max == 0.0 {
                [0, 0, 0]
            } else {
                let hue = (dr.atan2(dc).to_degrees() + 360.0) % 360.0;
                hsv_to_rgb(hue, 1.0, mag / max)
            };
            out.write_all(&rgb)?;
        }
    }
    out.flush()?;
    Ok(max)
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}
