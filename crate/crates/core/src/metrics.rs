//! Segmentation quality metrics: MAE, S-measure, mean E-measure and weighted F-measure.
//!
//! Predictions are maps in `[0, 1]`; ground truth is binary (`0.0` / `1.0`). Fixed
//! parameters follow the common saliency/camouflage evaluators: `α = 0.5` for the
//! S-measure, 256 thresholds for the E-measure, `β² = 1` with a 7×7 Gaussian of `σ = 5`
//! for the weighted F-measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::array::Map;
use crate::error::{Error, Result};
use crate::pgm;
use crate::pseudolabel::upsample;
use crate::tensorio::read_tensor;

pub const S_ALPHA: f64 = 0.5;
pub const E_THRESHOLDS: usize = 256;
pub const F_BETA_SQ: f64 = 1.0;
pub const WF_SIGMA: f64 = 5.0;
pub const WF_KERNEL: usize = 7;
/// Binarization level for 8-bit ground truth.
pub const GT_THRESHOLD: f64 = 0.5;

const EPS: f64 = f64::EPSILON;

fn check_shapes(pred: &Map, gt: &Map) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("metric input"));
    }
    Ok(())
}

fn check_binary(gt: &Map) -> Result<()> {
    if gt.as_slice().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::OutOfRange("ground truth must be binary".into()))
    }
}

/// Maps ground truth to `{0, 1}` with `v >= 0.5`.
pub fn binarize(gt: &Map) -> Map {
    gt.map(|v| if v >= GT_THRESHOLD { 1.0 } else { 0.0 })
}

/// Mean absolute error.
pub fn mae(pred: &Map, gt: &Map) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .map(|(p, g)| (p - g).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Structure measure: `α · S_object + (1 − α) · S_region`.
pub fn s_measure(pred: &Map, gt: &Map) -> Result<f64> {
    check_shapes(pred, gt)?;
    check_binary(gt)?;
    let y = gt.mean();
    let score = if y == 0.0 {
        1.0 - pred.mean()
    } else if y == 1.0 {
        pred.mean()
    } else {
        S_ALPHA * s_object(pred, gt) + (1.0 - S_ALPHA) * s_region(pred, gt)
    };
    Ok(score.max(0.0))
}

fn s_object(pred: &Map, gt: &Map) -> f64 {
    let u = gt.mean();
    let p = pred.as_slice();
    let g = gt.as_slice();
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(g)
        .filter(|(_, &g)| g == 0.0)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    u * object_similarity(&fg) + (1.0 - u) * object_similarity(&bg)
}

fn object_similarity(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * mean / (mean * mean + 1.0 + std + EPS)
}

/// Split point `(col, row)` of the region term: rounded foreground centroid plus one.
fn split_point(gt: &Map) -> (usize, usize) {
    let (h, w) = gt.shape();
    let (mut sr, mut sc, mut n) = (0.0f64, 0.0f64, 0usize);
    for r in 0..h {
        for c in 0..w {
            if gt.get(r, c) == 1.0 {
                sr += r as f64;
                sc += c as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return (
            (w as f64 / 2.0).round_ties_even() as usize + 1,
            (h as f64 / 2.0).round_ties_even() as usize + 1,
        );
    }
    let x = (sc / n as f64).round_ties_even() as usize + 1;
    let y = (sr / n as f64).round_ties_even() as usize + 1;
    (x, y)
}

fn s_region(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = gt.shape();
    let (x, y) = split_point(gt);
    let (x, y) = (x.min(w), y.min(h));
    let area = (h * w) as f64;
    let w1 = (x * y) as f64 / area;
    let w2 = (y * (w - x)) as f64 / area;
    let w3 = ((h - y) * x) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let quads = [
        (0..y, 0..x, w1),
        (0..y, x..w, w2),
        (y..h, 0..x, w3),
        (y..h, x..w, w4),
    ];
    quads
        .into_iter()
        .map(|(rows, cols, weight)| {
            if rows.is_empty() || cols.is_empty() {
                return 0.0;
            }
            weight * region_ssim(pred, gt, rows, cols)
        })
        .sum()
}

fn region_ssim(pred: &Map, gt: &Map, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let n = (rows.len() * cols.len()) as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for r in rows.clone() {
        for c in cols.clone() {
            sx += pred.get(r, c);
            sy += gt.get(r, c);
        }
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    if n > 1.0 {
        for r in rows.clone() {
            for c in cols.clone() {
                let dx = pred.get(r, c) - mx;
                let dy = gt.get(r, c) - my;
                vx += dx * dx;
                vy += dy * dy;
                cxy += dx * dy;
            }
        }
        vx /= n - 1.0;
        vy /= n - 1.0;
        cxy /= n - 1.0;
    }
    let alpha = 4.0 * mx * my * cxy;
    let beta = (mx * mx + my * my) * (vx + vy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Number of binarization thresholds `(t + 0.5) / 256` that `v` reaches.
#[inline]
fn thresholds_passed(v: f64) -> usize {
    let scaled = v * E_THRESHOLDS as f64;
    let mut t = ((scaled - 0.5).floor() + 1.0).clamp(0.0, E_THRESHOLDS as f64) as usize;
    while t > 0 && scaled < (t - 1) as f64 + 0.5 {
        t -= 1;
    }
    while t < E_THRESHOLDS && scaled >= t as f64 + 0.5 {
        t += 1;
    }
    t
}

/// Mean enhanced-alignment measure over 256 uniform thresholds.
pub fn e_measure(pred: &Map, gt: &Map) -> Result<f64> {
    check_shapes(pred, gt)?;
    check_binary(gt)?;
    let n = pred.len() as f64;
    let mut fg_hist = [0u64; E_THRESHOLDS + 1];
    let mut bg_hist = [0u64; E_THRESHOLDS + 1];
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        let t = thresholds_passed(p);
        if g == 1.0 {
            fg_hist[t] += 1;
        } else {
            bg_hist[t] += 1;
        }
    }
    let gt_fg: u64 = fg_hist.iter().sum();
    let gt_fg_f = gt_fg as f64;

    // Pixels passing threshold t are those with count > t; walk t downward.
    let mut total = 0.0;
    let (mut a, mut b) = (0u64, 0u64);
    for t in (0..E_THRESHOLDS).rev() {
        a += fg_hist[t + 1];
        b += bg_hist[t + 1];
        let (a_f, b_f) = (a as f64, b as f64);
        let sum = if gt_fg == 0 {
            n - b_f
        } else if gt_fg_f == n {
            a_f
        } else {
            let mp = (a_f + b_f) / n;
            let mg = gt_fg_f / n;
            let parts = [
                (a_f, 1.0 - mp, 1.0 - mg),
                (b_f, 1.0 - mp, -mg),
                (gt_fg_f - a_f, -mp, 1.0 - mg),
                (n - gt_fg_f - b_f, -mp, -mg),
            ];
            parts
                .iter()
                .map(|&(count, dp, dg)| {
                    let align = 2.0 * dp * dg / (dp * dp + dg * dg + EPS);
                    count * (align + 1.0).powi(2) / 4.0
                })
                .sum()
        };
        total += sum / n;
    }
    Ok(total / E_THRESHOLDS as f64)
}

/// Squared distance and flat index of the nearest foreground pixel for every pixel.
///
/// Among equidistant foreground pixels the one with the smallest column wins, then the
/// smallest row.
pub fn nearest_foreground(gt: &Map) -> Vec<Option<(u64, usize)>> {
    let (h, w) = gt.shape();
    // Per column: nearest foreground row, ties to the upper one.
    let mut col_best: Vec<Option<(u64, usize)>> = vec![None; h * w];
    for c in 0..w {
        let mut above: Option<usize> = None;
        for r in 0..h {
            if gt.get(r, c) == 1.0 {
                above = Some(r);
            }
            col_best[r * w + c] = above.map(|a| (((r - a) * (r - a)) as u64, a));
        }
        let mut below: Option<usize> = None;
        for r in (0..h).rev() {
            if gt.get(r, c) == 1.0 {
                below = Some(r);
            }
            if let Some(b) = below {
                let d = ((b - r) * (b - r)) as u64;
                let slot = &mut col_best[r * w + c];
                if slot.is_none_or(|(cur, _)| d < cur) {
                    *slot = Some((d, b));
                }
            }
        }
    }

    let mut out = vec![None; h * w];
    for r in 0..h {
        let line = &col_best[r * w..(r + 1) * w];
        for c in 0..w {
            let mut best: Option<(u64, usize, usize)> = None;
            for d in 0..w {
                let dd = (d * d) as u64;
                if best.is_some_and(|(bd, _, _)| dd > bd) {
                    break;
                }
                let left = c.checked_sub(d);
                let right = if d > 0 && c + d < w { Some(c + d) } else { None };
                for cc in [left, right].into_iter().flatten() {
                    if let Some((g, row)) = line[cc] {
                        let total = g + dd;
                        let better = match best {
                            None => true,
                            Some((bd, bc, _)) => total < bd || (total == bd && cc < bc),
                        };
                        if better {
                            best = Some((total, cc, row));
                        }
                    }
                }
            }
            out[r * w + c] = best.map(|(d, cc, row)| (d, row * w + cc));
        }
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut k = Vec::with_capacity(size * size);
    for i in -half..=half {
        for j in -half..=half {
            k.push((-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

fn filter_zero_padded(src: &[f64], h: usize, w: usize, kernel: &[f64], size: usize) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = 0.0;
            for i in -half..=half {
                let rr = r + i;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for j in -half..=half {
                    let cc = c + j;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    acc += kernel[((i + half) as usize) * size + (j + half) as usize]
                        * src[rr as usize * w + cc as usize];
                }
            }
            out[r as usize * w + c as usize] = acc;
        }
    }
    out
}

/// Weighted F-measure (`β² = 1`).
///
/// An empty ground truth scores 1 when the prediction is all zero and 0 otherwise.
pub fn weighted_f(pred: &Map, gt: &Map) -> Result<f64> {
    check_shapes(pred, gt)?;
    check_binary(gt)?;
    let (h, w) = gt.shape();
    let p = pred.as_slice();
    let g = gt.as_slice();
    if g.iter().all(|&v| v == 0.0) {
        return Ok(if p.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 });
    }

    let err: Vec<f64> = p.iter().zip(g).map(|(a, b)| (a - b).abs()).collect();
    let nearest = nearest_foreground(gt);
    let spread: Vec<f64> = (0..h * w)
        .map(|i| {
            if g[i] == 1.0 {
                err[i]
            } else {
                err[nearest[i].expect("foreground exists").1]
            }
        })
        .collect();
    let kernel = gaussian_kernel(WF_KERNEL, WF_SIGMA);
    let blurred = filter_zero_padded(&spread, h, w, &kernel, WF_KERNEL);

    let decay = 0.5f64.ln() / 5.0;
    let (mut fg_count, mut fg_err, mut bg_err) = (0.0, 0.0, 0.0);
    for i in 0..h * w {
        if g[i] == 1.0 {
            fg_count += 1.0;
            fg_err += if blurred[i] < err[i] { blurred[i] } else { err[i] };
        } else {
            let dist = (nearest[i].expect("foreground exists").0 as f64).sqrt();
            bg_err += err[i] * (2.0 - (decay * dist).exp());
        }
    }
    let tp = fg_count - fg_err;
    let recall = 1.0 - fg_err / fg_count;
    let precision = tp / (EPS + tp + bg_err);
    Ok((1.0 + F_BETA_SQ) * recall * precision / (EPS + recall + F_BETA_SQ * precision))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub s_alpha: f64,
    pub e_xi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateMetrics {
    pub s_alpha: f64,
    pub e_xi: f64,
    pub f_beta_w: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

impl MetricsReport {
    pub fn from_rows(mut per_image: Vec<ImageMetrics>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Empty("no images evaluated"));
        }
        per_image.sort_by(|a, b| a.id.cmp(&b.id));
        let n = per_image.len() as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        let aggregate = AggregateMetrics {
            s_alpha: mean(|m| m.s_alpha),
            e_xi: mean(|m| m.e_xi),
            f_beta_w: mean(|m| m.f_beta_w),
            mae: mean(|m| m.mae),
        };
        Ok(Self {
            per_image,
            aggregate,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `id,s_alpha,e_xi,f_beta_w,mae` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,s_alpha,e_xi,f_beta_w,mae\n");
        for m in &self.per_image {
            let _ = writeln!(out, "{},{},{},{},{}", m.id, m.s_alpha, m.e_xi, m.f_beta_w, m.mae);
        }
        let a = &self.aggregate;
        let _ = writeln!(out, "mean,{},{},{},{}", a.s_alpha, a.e_xi, a.f_beta_w, a.mae);
        out
    }
}

/// All four metrics for one prediction; `gt` is binarized at 0.5 first.
pub fn evaluate_pair(id: &str, pred: &Map, gt: &Map) -> Result<ImageMetrics> {
    let gt = binarize(gt);
    let resized;
    let pred = if pred.shape() != gt.shape() {
        resized = upsample(pred, gt.height(), gt.width())?;
        &resized
    } else {
        pred
    };
    if !pred.is_unit_range() {
        return Err(Error::OutOfRange(format!("{id}: prediction outside [0, 1]")));
    }
    Ok(ImageMetrics {
        id: id.to_string(),
        s_alpha: s_measure(pred, &gt)?,
        e_xi: e_measure(pred, &gt)?,
        f_beta_w: weighted_f(pred, &gt)?,
        mae: mae(pred, &gt)?,
    })
}

/// Reads a map from `.rsgt` (f32 or u8) or `.pgm`.
pub fn read_map(path: &Path) -> Result<Map> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => pgm::read_pgm(path),
        Some("rsgt") => read_tensor(path)?.to_map(),
        _ => Err(Error::InvalidArgument(format!(
            "{}: expected a .rsgt or .pgm file",
            path.display()
        ))),
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("pgm") | Some("rsgt")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            // Prefer the float tensor when both encodings exist.
            let replace = out
                .get(stem)
                .is_none_or(|p: &PathBuf| p.extension().and_then(|e| e.to_str()) != Some("rsgt"));
            if replace {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Scores every ground-truth mask in `gt_dir` against the prediction with the same stem.
pub fn evaluate_dir(pred_dir: impl AsRef<Path>, gt_dir: impl AsRef<Path>) -> Result<MetricsReport> {
    let preds = stems(pred_dir.as_ref())?;
    let gts = stems(gt_dir.as_ref())?;
    if !gts.keys().any(|k| preds.contains_key(k)) {
        return Err(Error::Empty("no common file stems between predictions and ground truth"));
    }
    if let Some(missing) = gts.keys().find(|k| !preds.contains_key(*k)) {
        return Err(Error::MissingCounterpart(missing.clone()));
    }
    let rows: Vec<ImageMetrics> = gts
        .par_iter()
        .map(|(stem, gt_path)| {
            let gt = read_map(gt_path)?;
            let pred = read_map(&preds[stem])?;
            evaluate_pair(stem, &pred, &gt)
        })
        .collect::<Result<_>>()?;
    MetricsReport::from_rows(rows)
}
