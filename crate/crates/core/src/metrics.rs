//! Frame accuracy, segmental edit score and F1@k for temporal segmentation.
//!
//! Segment-level scores may ignore a background label; frame accuracy
//! always counts every frame.

use crate::error::{Error, Result};
use crate::synthdata::{segments_of, Segment};

fn segments_without(labels: &[usize], background: Option<usize>) -> Vec<Segment> {
    segments_of(labels)
        .into_iter()
        .filter(|s| Some(s.label) != background)
        .collect()
}

/// Percentage of frames whose labels agree.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "label sequences differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty label sequence".into()));
    }
    let hits = pred.iter().zip(gt).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let next = (row[j + 1] + 1).min(row[j] + 1).min(diag + usize::from(x != y));
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// `100·(1 − lev / max(|pred segs|, |gt segs|))`, 100 when both are empty.
pub fn edit_score(pred: &[usize], gt: &[usize], background: Option<usize>) -> f64 {
    let p: Vec<usize> = segments_without(pred, background).iter().map(|s| s.label).collect();
    let g: Vec<usize> = segments_without(gt, background).iter().map(|s| s.label).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    (100.0 * (1.0 - levenshtein(&p, &g) as f64 / denom as f64)).max(0.0)
}

fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    inter as f64 / union as f64
}

/// F1 at overlap threshold `k` percent with greedy in-order matching.
pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64, background: Option<usize>) -> Result<f64> {
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::InvalidArgument(format!("overlap threshold {k} not in (0, 100]")));
    }
    let ps = segments_without(pred, background);
    let gs = segments_without(gt, background);
    let mut used = vec![false; gs.len()];
    let mut tp = 0usize;
    for p in &ps {
        let best = gs
            .iter()
            .enumerate()
            .filter(|(j, g)| !used[*j] && g.label == p.label)
            .map(|(j, g)| (j, iou(p, g)))
            .fold(None, |acc: Option<(usize, f64)>, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        if let Some((j, v)) = best {
            if v >= k / 100.0 {
                used[j] = true;
                tp += 1;
            }
        }
    }
    let fp = ps.len() - tp;
    let fneg = gs.len() - tp;
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fneg) as f64;
    Ok(200.0 * precision * recall / (precision + recall))
}
