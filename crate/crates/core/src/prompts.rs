//! Mask and point prompts for a promptable segmenter.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::array::Map;
use crate::error::{Error, Result};
use crate::pseudolabel::{apply_threshold, Threshold};
use crate::tensorio::{read_tensor, write_tensor, Tensor};

/// Side of the low-resolution mask prompt the segmenter consumes.
pub const MASK_PROMPT_SIDE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptConfig {
    pub t_pos: f64,
    pub t_neg: f64,
    pub mask_tau: f64,
    /// Cap per polarity.
    pub max_points: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            t_pos: 0.95,
            t_neg: 0.005,
            mask_tau: 0.3,
            max_points: 10,
        }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_neg && self.t_neg < self.t_pos && self.t_pos <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= t_neg < t_pos <= 1, got t_neg = {}, t_pos = {}",
                self.t_neg, self.t_pos
            )));
        }
        if !(0.0..1.0).contains(&self.mask_tau) {
            return Err(Error::InvalidArgument(format!(
                "mask threshold {} not in [0, 1)",
                self.mask_tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    /// Column in source pixels.
    pub x: usize,
    /// Row in source pixels.
    pub y: usize,
    /// 1 for foreground, 0 for background.
    pub label: u8,
    /// Pseudo-label value at the point.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub mask_prompt: Map,
    pub points: Vec<PromptPoint>,
    pub source_resolution: (usize, usize),
}

impl PromptSet {
    pub fn positives(&self) -> impl Iterator<Item = &PromptPoint> {
        self.points.iter().filter(|p| p.label == 1)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &PromptPoint> {
        self.points.iter().filter(|p| p.label == 0)
    }
}

/// Minimum pixel distance between two points of the same polarity.
pub fn min_point_spacing(height: usize, width: usize) -> f64 {
    height.max(width) as f64 / 16.0
}

pub fn extract_prompts(p: &Map, cfg: &PromptConfig) -> Result<PromptSet> {
    cfg.validate()?;
    if p.is_empty() {
        return Err(Error::Empty("pseudo-label"));
    }
    if !p.is_unit_range() {
        return Err(Error::OutOfRange("pseudo-label values outside [0, 1]".into()));
    }
    let masked = if cfg.mask_tau > 0.0 {
        apply_threshold(p, Threshold::Fixed(cfg.mask_tau))
    } else {
        p.clone()
    };
    let mask_prompt = resample_area(&masked, MASK_PROMPT_SIDE, MASK_PROMPT_SIDE);

    let (h, w) = p.shape();
    let spacing = min_point_spacing(h, w);
    let values = p.as_slice();

    let mut pos: Vec<usize> = (0..values.len()).filter(|&i| values[i] >= cfg.t_pos).collect();
    pos.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut neg: Vec<usize> = (0..values.len()).filter(|&i| values[i] <= cfg.t_neg).collect();
    neg.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    let mut points = Vec::new();
    for (order, label) in [(pos, 1u8), (neg, 0u8)] {
        let picked = select_spaced(&order, w, spacing, cfg.max_points);
        points.extend(picked.into_iter().map(|i| PromptPoint {
            x: i % w,
            y: i / w,
            label,
            confidence: values[i],
        }));
    }

    Ok(PromptSet {
        mask_prompt,
        points,
        source_resolution: (h, w),
    })
}

fn select_spaced(order: &[usize], width: usize, spacing: f64, max: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(max);
    let min_sq = spacing * spacing;
    for &i in order {
        if picked.len() >= max {
            break;
        }
        let (y, x) = ((i / width) as f64, (i % width) as f64);
        let clear = picked.iter().all(|&j| {
            let (py, px) = ((j / width) as f64, (j % width) as f64);
            (y - py).powi(2) + (x - px).powi(2) >= min_sq
        });
        if clear {
            picked.push(i);
        }
    }
    picked
}

/// Area-weighted resampling: every output pixel is the mean of the source area it covers.
pub fn resample_area(src: &Map, height: usize, width: usize) -> Map {
    let rows = area_taps(src.height(), height);
    let cols = area_taps(src.width(), width);
    let mut tmp = vec![0.0f64; height * src.width()];
    for (r, taps) in rows.iter().enumerate() {
        for c in 0..src.width() {
            tmp[r * src.width() + c] = taps.iter().map(|&(j, wt)| wt * src.get(j, c)).sum();
        }
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let line = &tmp[r * src.width()..(r + 1) * src.width()];
        for taps in &cols {
            out.push(taps.iter().map(|&(j, wt)| wt * line[j]).sum());
        }
    }
    Map::new(height, width, out).expect("shape is consistent")
}

fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = (i * src) as f64 / dst as f64;
            let hi = ((i + 1) * src) as f64 / dst as f64;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|j| {
                    let overlap = hi.min(j as f64 + 1.0) - lo.max(j as f64);
                    (overlap > 0.0).then_some((j, overlap / scale))
                })
                .collect()
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PromptFile {
    source_resolution: [usize; 2],
    mask_prompt_file: String,
    points: Vec<PromptPoint>,
}

/// Path of the mask-prompt tensor written next to a prompts JSON file.
pub fn mask_prompt_path(json_path: &Path) -> PathBuf {
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "prompts".into());
    json_path.with_file_name(format!("{stem}.mask.rsgt"))
}

/// Prompts JSON with stable key order; the mask prompt goes to a sibling RSGT file.
pub fn prompts_json(ps: &PromptSet, mask_prompt_file: &str) -> String {
    let file = PromptFile {
        source_resolution: [ps.source_resolution.0, ps.source_resolution.1],
        mask_prompt_file: mask_prompt_file.to_string(),
        points: ps.points.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("prompt file serializes");
    s.push('\n');
    s
}

pub fn write_prompts(ps: &PromptSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mask_path = mask_prompt_path(path);
    let mask_name = mask_path
        .file_name()
        .expect("mask path has a file name")
        .to_string_lossy()
        .into_owned();
    write_tensor(&mask_path, &Tensor::from_map(&ps.mask_prompt)?)?;
    fs::write(path, prompts_json(ps, &mask_name)).map_err(|e| Error::io(path, e))
}

pub fn read_prompts(path: impl AsRef<Path>) -> Result<PromptSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: PromptFile =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
    let mask_path = path.with_file_name(&file.mask_prompt_file);
    let mask_prompt = read_tensor(&mask_path)?.to_map()?;
    Ok(PromptSet {
        mask_prompt,
        points: file.points,
        source_resolution: (file.source_resolution[0], file.source_resolution[1]),
    })
}
