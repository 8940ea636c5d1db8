//! Per-token retrieval into a full-resolution pseudo-label map.

use std::fmt;
use std::str::FromStr;

use crate::array::{Map, Matrix};
use crate::error::{Error, Result};
use crate::search::search_batch;
use crate::store::ClusteredStore;
use crate::PATCH_SIZE;

/// Denominator guard of min-max normalization.
pub const NORMALIZE_EPSILON: f64 = 1e-9;

/// Patch tokens of one query image in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryGrid {
    tokens: Matrix,
    grid_side: usize,
    source_resolution: (usize, usize),
}

impl QueryGrid {
    /// `tokens` must hold `grid_side²` rows and the image side must be `grid_side × 14`.
    pub fn new(tokens: Matrix, grid_side: usize, source_resolution: (usize, usize)) -> Result<Self> {
        if grid_side == 0 {
            return Err(Error::InvalidArgument("grid side must be at least 1".into()));
        }
        if tokens.rows() != grid_side * grid_side {
            return Err(Error::Shape(format!(
                "{} tokens do not form a {grid_side}x{grid_side} grid",
                tokens.rows()
            )));
        }
        let side = grid_side * PATCH_SIZE;
        if source_resolution != (side, side) {
            return Err(Error::Shape(format!(
                "resolution {}x{} does not match a {grid_side}x{grid_side} grid of {PATCH_SIZE}px patches (expected {side}x{side})",
                source_resolution.0, source_resolution.1
            )));
        }
        Ok(Self {
            tokens,
            grid_side,
            source_resolution,
        })
    }

    /// Grid for a square image of side `side`, which must be a multiple of 14.
    pub fn for_image_side(tokens: Matrix, side: usize) -> Result<Self> {
        if side == 0 || side % PATCH_SIZE != 0 {
            return Err(Error::Shape(format!(
                "image side {side} is not a positive multiple of {PATCH_SIZE}"
            )));
        }
        Self::new(tokens, side / PATCH_SIZE, (side, side))
    }

    pub fn tokens(&self) -> &Matrix {
        &self.tokens
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn source_resolution(&self) -> (usize, usize) {
        self.source_resolution
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    /// Full-resolution map, values in `[0, 1]`.
    pub values: Map,
    /// Token map before upsampling.
    pub grid: Map,
}

impl PseudoLabel {
    pub fn apply_threshold(&self, strategy: Threshold) -> PseudoLabel {
        PseudoLabel {
            values: apply_threshold(&self.values, strategy),
            grid: self.grid.clone(),
        }
    }
}

/// Retrieves the top-k centroids for every token and averages their mask scores.
pub fn generate(store: &ClusteredStore, grid: &QueryGrid, topk: usize) -> Result<PseudoLabel> {
    let hits = search_batch(store, &grid.tokens, topk)?;
    let g = grid.grid_side;
    let token_values: Vec<f64> = hits
        .iter()
        .map(|h| h.iter().map(|x| x.mask_score as f64).sum::<f64>() / h.len() as f64)
        .collect();
    let token_map = Map::new(g, g, token_values)?;
    let (h, w) = grid.source_resolution;
    let values = upsample(&token_map, h, w)?;
    Ok(PseudoLabel {
        values,
        grid: token_map,
    })
}

/// Bilinear resize with half-pixel centres: output pixel `x` samples source coordinate
/// `(x + 0.5) · src / dst − 0.5`, clamped to the source extent.
pub fn upsample(grid: &Map, height: usize, width: usize) -> Result<Map> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("target dimensions must be non-zero".into()));
    }
    if grid.is_empty() {
        return Err(Error::Empty("grid map"));
    }
    let rows = axis_taps(grid.height(), height);
    let cols = axis_taps(grid.width(), width);
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, ty) in &rows {
        for &(c0, c1, tx) in &cols {
            let top = lerp(grid.get(r0, c0), grid.get(r0, c1), tx);
            let bottom = lerp(grid.get(r1, c0), grid.get(r1, c1), tx);
            out.push(lerp(top, bottom, ty));
        }
    }
    Map::new(height, width, out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|x| {
            let u = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, u - i0 as f64)
        })
        .collect()
}

/// Post-processing applied to a pseudo-label before prompting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Identity.
    None,
    /// Values below `tau` become 0; the rest are kept as they are.
    Fixed(f64),
    /// Min-max normalization `(p − min) / (max − min + 1e-9)`.
    Normalized,
}

impl Threshold {
    /// The `T_n` strategy with `tau = n / 10`; `n = 0` is the identity.
    pub fn step(n: u8) -> Result<Self> {
        match n {
            0 => Ok(Threshold::None),
            1..=9 => Ok(Threshold::Fixed(n as f64 / 10.0)),
            _ => Err(Error::InvalidArgument(format!("threshold step {n} not in 0..=9"))),
        }
    }

    pub fn validate(self) -> Result<Self> {
        match self {
            Threshold::Fixed(tau) if !(tau > 0.0 && tau < 1.0) => Err(Error::InvalidArgument(
                format!("fixed threshold {tau} not in (0, 1)"),
            )),
            other => Ok(other),
        }
    }
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(0.3)
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::None => f.write_str("T0"),
            Threshold::Normalized => f.write_str("TN"),
            Threshold::Fixed(tau) => {
                let n = tau * 10.0;
                if (n - n.round()).abs() < 1e-12 {
                    write!(f, "T{}", n.round() as u8)
                } else {
                    write!(f, "{tau}")
                }
            }
        }
    }
}

impl FromStr for Threshold {
    type Err = Error;

    /// Accepts `T0`..`T9`, `TN`, `none`, `normalized`, or a bare value in (0, 1).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "none" | "t0" => return Ok(Threshold::None),
            "tn" | "normalized" => return Ok(Threshold::Normalized),
            _ => {}
        }
        if let Some(digit) = lower.strip_prefix('t') {
            if let Ok(n) = digit.parse::<u8>() {
                return Threshold::step(n);
            }
        }
        match lower.parse::<f64>() {
            Ok(tau) => Threshold::Fixed(tau).validate(),
            Err(_) => Err(Error::InvalidArgument(format!(
                "unknown threshold {s:?} (expected T0..T9, TN or a value in (0, 1))"
            ))),
        }
    }
}

pub fn apply_threshold(p: &Map, strategy: Threshold) -> Map {
    match strategy {
        Threshold::None => p.clone(),
        Threshold::Fixed(tau) => p.map(|v| if v < tau { 0.0 } else { v }),
        Threshold::Normalized => {
            let Some((lo, hi)) = p.min_max() else {
                return p.clone();
            };
            let denom = hi - lo + NORMALIZE_EPSILON;
            p.map(|v| (v - lo) / denom)
        }
    }
}
