//! Mean absolute error, adaptive F-measure, mean E-measure and S-measure
//! for a soft prediction against a binary mask.
//!
//! Every function takes row-major planes of equal size. Predictions are
//! expected in `[0, 1]`; masks are thresholded at 0.5.

use iceg_tensor::exec;
use serde::Serialize;

use crate::error::{IcegError, Result};

pub const EPS: f64 = 1e-8;
pub const BETA_SQ: f64 = 0.3;
pub const ALPHA: f64 = 0.5;

fn check(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<()> {
    if pred.len() != h * w || gt.len() != h * w || pred.is_empty() {
        return Err(IcegError::Dimension(format!(
            "prediction ({}) and mask ({}) must both be {h}x{w}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn binary(gt: &[f64]) -> Vec<bool> {
    gt.iter().map(|&g| g >= 0.5).collect()
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64
}

/// F-measure of the prediction binarised at `min(2 mean, 1)`, with
/// `beta^2 = 0.3`. An all-zero prediction, or one with no true positives,
/// scores 0.
pub fn adaptive_f_measure(pred: &[f64], gt: &[f64]) -> f64 {
    if pred.iter().all(|&p| p == 0.0) {
        return 0.0;
    }
    let tau = (2.0 * mean(pred)).min(1.0);
    let g = binary(gt);
    let (mut tp, mut predicted, mut positives) = (0usize, 0usize, 0usize);
    for (&p, &gi) in pred.iter().zip(&g) {
        let hit = p >= tau;
        predicted += hit as usize;
        positives += gi as usize;
        tp += (hit && gi) as usize;
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / predicted as f64;
    let recall = tp as f64 / positives as f64;
    (1.0 + BETA_SQ) * precision * recall / (BETA_SQ * precision + recall)
}

/// Mean enhanced-alignment score of the mean-removed maps. An empty mask
/// scores `mean(1 - pred)`, a full mask `mean(pred)`.
pub fn e_measure(pred: &[f64], gt: &[f64]) -> f64 {
    let g: Vec<f64> = binary(gt).iter().map(|&b| b as u8 as f64).collect();
    let gm = mean(&g);
    if gm == 0.0 {
        return mean(&pred.iter().map(|p| 1.0 - p).collect::<Vec<_>>());
    }
    if gm == 1.0 {
        return mean(pred);
    }
    let pm = mean(pred);
    let mut acc = 0.0;
    for (&p, &gi) in pred.iter().zip(&g) {
        let (dp, dg) = (p - pm, gi - gm);
        let xi = 2.0 * dp * dg / (dp * dp + dg * dg + EPS);
        acc += (1.0 + xi).powi(2) / 4.0;
    }
    acc / pred.len() as f64
}

/// Similarity of a region's mean and spread to a perfect foreground.
fn object_score(values: &[f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let m = mean(values);
    let sigma = if n > 1 {
        (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sigma + EPS)
}

fn object_aware(pred: &[f64], g: &[bool]) -> f64 {
    let fg: Vec<f64> = pred.iter().zip(g).filter(|(_, &b)| b).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = pred.iter().zip(g).filter(|(_, &b)| !b).map(|(&p, _)| 1.0 - p).collect();
    let u = fg.len() as f64 / g.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// SSIM-style score of one rectangular region.
fn region_ssim(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len();
    let (x, y) = (mean(pred), mean(gt));
    let (mut sx, mut sy, mut sxy) = (0.0, 0.0, 0.0);
    if n > 1 {
        for (&p, &g) in pred.iter().zip(gt) {
            sx += (p - x).powi(2);
            sy += (g - y).powi(2);
            sxy += (p - x) * (g - y);
        }
        let d = (n - 1) as f64;
        sx /= d;
        sy /= d;
        sxy /= d;
    }
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Split point of the region-aware term: the rounded foreground centroid
/// (ties to even) plus one, as `(x, y)`.
pub fn split_point(g: &[bool], h: usize, w: usize) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            if g[y * w + x] {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    let (cx, cy) = if n == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even(), (sy / n as f64).round_ties_even())
    };
    (cx as usize + 1, cy as usize + 1)
}

fn crop(v: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        out.extend_from_slice(&v[y * w + cols.start..y * w + cols.end]);
    }
    out
}

fn region_aware(pred: &[f64], g: &[bool], h: usize, w: usize) -> f64 {
    let (x, y) = split_point(g, h, w);
    let (x, y) = (x.min(w), y.min(h));
    let gf: Vec<f64> = g.iter().map(|&b| b as u8 as f64).collect();
    let area = (h * w) as f64;
    let quads = [
        (0..y, 0..x),
        (0..y, x..w),
        (y..h, 0..x),
        (y..h, x..w),
    ];
    let mut score = 0.0;
    for (rows, cols) in quads {
        let count = rows.len() * cols.len();
        if count == 0 {
            continue;
        }
        let p = crop(pred, w, rows.clone(), cols.clone());
        let q = crop(&gf, w, rows, cols);
        score += count as f64 / area * region_ssim(&p, &q);
    }
    score
}

/// `alpha S_object + (1 - alpha) S_region`, floored at 0. An empty mask
/// scores `1 - mean(pred)`, a full mask `mean(pred)`.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    let g = binary(gt);
    let y = g.iter().filter(|&&b| b).count() as f64 / g.len() as f64;
    if y == 0.0 {
        return 1.0 - mean(pred);
    }
    if y == 1.0 {
        return mean(pred);
    }
    let s = ALPHA * object_aware(pred, &g) + (1.0 - ALPHA) * region_aware(pred, &g, h, w);
    s.max(0.0)
}

/// The four scores of one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImageScores {
    pub mae: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
}

impl ImageScores {
    pub fn compute(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<Self> {
        check(pred, gt, h, w)?;
        Ok(ImageScores {
            mae: mae(pred, gt),
            f_beta: adaptive_f_measure(pred, gt),
            e_phi: e_measure(pred, gt),
            s_alpha: s_measure(pred, gt, h, w),
        })
    }

    /// True when `self` is at least as good as `other` on every score
    /// (lower error, higher agreement).
    pub fn dominates(&self, other: &ImageScores) -> bool {
        self.mae <= other.mae
            && self.f_beta >= other.f_beta
            && self.e_phi >= other.e_phi
            && self.s_alpha >= other.s_alpha
    }
}

/// Dataset-level means with optional per-image scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_beta: f64,
    pub e_phi: f64,
    pub s_alpha: f64,
    pub per_image: Option<Vec<(String, ImageScores)>>,
}

impl MetricReport {
    pub fn summary(&self) -> ImageScores {
        ImageScores {
            mae: self.mae,
            f_beta: self.f_beta,
            e_phi: self.e_phi,
            s_alpha: self.s_alpha,
        }
    }
}

/// One prediction/mask pair awaiting evaluation.
pub struct EvalItem {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub pred: Vec<f64>,
    pub gt: Vec<f64>,
}

/// Scores every item (in parallel when enabled) and averages them.
pub fn evaluate_items(items: &[EvalItem], keep_per_image: bool) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(IcegError::Parameter("nothing to evaluate".into()));
    }
    let scores = exec::map_indexed(items.len(), |i| {
        let it = &items[i];
        ImageScores::compute(&it.pred, &it.gt, it.height, it.width)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    let avg = |f: fn(&ImageScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mae: avg(|s| s.mae),
        f_beta: avg(|s| s.f_beta),
        e_phi: avg(|s| s.e_phi),
        s_alpha: avg(|s| s.s_alpha),
        per_image: keep_per_image.then(|| items.iter().map(|i| i.id.clone()).zip(scores).collect()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_hand_example() {
        let p = [0.2, 0.8, 0.5, 0.0];
        let g = [0.0, 1.0, 1.0, 0.0];
        assert!((mae(&p, &g) - 0.225).abs() < 1e-15);
        let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        assert_eq!(mae(&inv, &g), 1.0);
    }

    #[test]
    fn perfect_prediction_scores() {
        let g: Vec<f64> = (0..64).map(|i| ((i % 8) < 3 && i / 8 > 2) as u8 as f64).collect();
        let s = ImageScores::compute(&g, &g, 8, 8).unwrap();
        assert_eq!(s.mae, 0.0);
        assert!((s.f_beta - 1.0).abs() < 1e-12);
        assert!((s.e_phi - 1.0).abs() < 1e-6);
        assert!((s.s_alpha - 1.0).abs() < 1e-3);
    }

    #[test]
    fn empty_prediction_has_zero_f() {
        let g: Vec<f64> = (0..16).map(|i| (i < 5) as u8 as f64).collect();
        assert_eq!(adaptive_f_measure(&[0.0; 16], &g), 0.0);
    }

    #[test]
    fn inverted_balanced_mask_is_poorly_aligned() {
        let g: Vec<f64> = (0..64).map(|i| (i < 32) as u8 as f64).collect();
        let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        assert!(e_measure(&inv, &g) < 0.5);
    }

    #[test]
    fn degenerate_masks() {
        let p = [0.25, 0.5, 0.75, 0.0];
        assert!((s_measure(&p, &[0.0; 4], 2, 2) - (1.0 - 0.375)).abs() < 1e-15);
        assert!((s_measure(&p, &[1.0; 4], 2, 2) - 0.375).abs() < 1e-15);
        assert!((e_measure(&p, &[0.0; 4]) - 0.625).abs() < 1e-15);
        assert!((e_measure(&p, &[1.0; 4]) - 0.375).abs() < 1e-15);
    }
}
