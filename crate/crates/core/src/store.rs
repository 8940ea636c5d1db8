//! The vector/mask database before and after compression.

use std::fmt::Write as _;

use crate::array::{Map, Matrix};
use crate::error::{Error, Result};
use crate::search::{normalize, Metric};
use crate::tensorio::Tensor;

/// Tolerance on row norms of a cosine store.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

/// One patch feature vector with the mean ground-truth mask value of its patch.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorMaskPair {
    pub vector: Vec<f32>,
    pub mask_score: f32,
}

impl VectorMaskPair {
    pub fn new(vector: Vec<f32>, mask_score: f32) -> Result<Self> {
        check_score(mask_score)?;
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self { vector, mask_score })
    }
}

fn check_score(s: f32) -> Result<()> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("mask score {s} outside [0, 1]")))
    }
}

/// Uncompressed pairs in image-major, row-major token order.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDatabase {
    vectors: Matrix,
    mask_scores: Vec<f32>,
    source_count: usize,
}

impl RawDatabase {
    pub fn new(vectors: Matrix, mask_scores: Vec<f32>, source_count: usize) -> Result<Self> {
        if vectors.rows() != mask_scores.len() {
            return Err(Error::Shape(format!(
                "{} vectors but {} mask scores",
                vectors.rows(),
                mask_scores.len()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("feature vectors"));
        }
        for &s in &mask_scores {
            check_score(s)?;
        }
        Ok(Self {
            vectors,
            mask_scores,
            source_count,
        })
    }

    pub fn from_pairs(pairs: &[VectorMaskPair], source_count: usize) -> Result<Self> {
        let rows: Vec<&[f32]> = pairs.iter().map(|p| p.vector.as_slice()).collect();
        let vectors = Matrix::from_rows(&rows)?;
        Self::new(vectors, pairs.iter().map(|p| p.mask_score).collect(), source_count)
    }

    pub fn len(&self) -> usize {
        self.mask_scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask_scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn mask_scores(&self) -> &[f32] {
        &self.mask_scores
    }

    pub fn pair(&self, i: usize) -> VectorMaskPair {
        VectorMaskPair {
            vector: self.vectors.row(i).to_vec(),
            mask_score: self.mask_scores[i],
        }
    }

    /// `(vectors N×D, mask scores N)` as exchange tensors.
    pub fn to_tensors(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            Tensor::from_matrix(&self.vectors)?,
            Tensor::f32(vec![self.len()], self.mask_scores.clone())?,
        ))
    }
}

/// The compressed dictionary: `K` centroids with one mask score each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredStore {
    centroids: Matrix,
    mask_scores: Vec<f32>,
    metric: Metric,
    normalized: bool,
}

impl ClusteredStore {
    pub fn new(centroids: Matrix, mask_scores: Vec<f32>, metric: Metric, normalized: bool) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(Error::Empty("store needs at least one centroid"));
        }
        if centroids.cols() == 0 {
            return Err(Error::Empty("store needs a non-zero dimension"));
        }
        if centroids.rows() != mask_scores.len() {
            return Err(Error::Shape(format!(
                "{} centroids but {} mask scores",
                centroids.rows(),
                mask_scores.len()
            )));
        }
        if !centroids.is_finite() {
            return Err(Error::NonFinite("centroids"));
        }
        for &s in &mask_scores {
            check_score(s)?;
        }
        if metric == Metric::Cosine {
            if !normalized {
                return Err(Error::OutOfRange(
                    "cosine store must be flagged as normalized".into(),
                ));
            }
            for (i, row) in centroids.iter_rows().enumerate() {
                let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                    return Err(Error::OutOfRange(format!(
                        "cosine store row {i} has norm {norm}"
                    )));
                }
            }
        }
        Ok(Self {
            centroids,
            mask_scores,
            metric,
            normalized,
        })
    }

    /// Builds a store from raw rows; rows are L2-normalized for the cosine metric.
    pub fn from_raw_rows<R: AsRef<[f32]>>(rows: &[R], mask_scores: Vec<f32>, metric: Metric) -> Result<Self> {
        let mut centroids = Matrix::from_rows(rows)?;
        let normalized = metric == Metric::Cosine;
        if normalized {
            for i in 0..centroids.rows() {
                normalize(centroids.row_mut(i));
            }
        }
        Self::new(centroids, mask_scores, metric, normalized)
    }

    pub fn len(&self) -> usize {
        self.mask_scores.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.mask_scores.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn mask_scores(&self) -> &[f32] {
        &self.mask_scores
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Averages each `(H/g) × (W/g)` block of a ground-truth mask into a `g × g` token grid.
pub fn pool_mask(gt: &Map, grid_side: usize) -> Result<Map> {
    let (h, w) = gt.shape();
    if grid_side == 0 || h == 0 || w == 0 || h % grid_side != 0 || w % grid_side != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} mask is not divisible into a {grid_side}x{grid_side} grid"
        )));
    }
    if !gt.is_unit_range() {
        return Err(Error::OutOfRange("mask values outside [0, 1]".into()));
    }
    let (bh, bw) = (h / grid_side, w / grid_side);
    let area = (bh * bw) as f64;
    let mut out = Map::filled(grid_side, grid_side, 0.0);
    for r in 0..h {
        for c in 0..w {
            let (gr, gc) = (r / bh, c / bw);
            out.set(gr, gc, out.get(gr, gc) + gt.get(r, c));
        }
    }
    Ok(out.map(|s| (s / area).clamp(0.0, 1.0)))
}

/// Collects per-image token features and token mask values into one database.
///
/// Each feature matrix is `T × D` with `T = g²`; class tokens must already be dropped.
pub fn ingest(features: &[Matrix], token_masks: &[Vec<f32>]) -> Result<RawDatabase> {
    if features.is_empty() {
        return Err(Error::Empty("no images to ingest"));
    }
    if features.len() != token_masks.len() {
        return Err(Error::Shape(format!(
            "{} feature tensors but {} token masks",
            features.len(),
            token_masks.len()
        )));
    }
    let dim = features[0].cols();
    if dim == 0 {
        return Err(Error::Empty("zero-dimensional features"));
    }
    let total: usize = features.iter().map(Matrix::rows).sum();
    let mut vectors = Vec::with_capacity(total * dim);
    let mut scores = Vec::with_capacity(total);
    for (i, (f, m)) in features.iter().zip(token_masks).enumerate() {
        if f.cols() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: f.cols(),
            });
        }
        let t = f.rows();
        let g = t.isqrt();
        if t == 0 || g * g != t {
            return Err(Error::Shape(format!(
                "image {i}: {t} tokens do not form a square grid"
            )));
        }
        if m.len() != t {
            return Err(Error::Shape(format!(
                "image {i}: mask has {} values for {t} tokens",
                m.len()
            )));
        }
        if !f.is_finite() {
            return Err(Error::NonFinite("feature tensor"));
        }
        vectors.extend_from_slice(f.as_slice());
        scores.extend_from_slice(m);
    }
    RawDatabase::new(Matrix::new(total, dim, vectors)?, scores, features.len())
}

/// Concatenates two stores without re-clustering; `a`'s entries come first.
pub fn merge(a: &ClusteredStore, b: &ClusteredStore) -> Result<ClusteredStore> {
    if a.dim() != b.dim() {
        return Err(Error::Incompatible(format!(
            "dimension {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    if a.metric != b.metric {
        return Err(Error::Incompatible(format!(
            "metric {} vs {}",
            a.metric, b.metric
        )));
    }
    if a.normalized != b.normalized {
        return Err(Error::Incompatible("normalization flags differ".into()));
    }
    let mut centroids = a.centroids.clone();
    centroids.append(&b.centroids)?;
    let mut scores = a.mask_scores.clone();
    scores.extend_from_slice(&b.mask_scores);
    ClusteredStore::new(centroids, scores, a.metric, a.normalized)
}

/// Counts of centroid mask scores over ten uniform bins of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoreHistogram {
    pub counts: [u64; 10],
}

impl ScoreHistogram {
    pub const BINS: usize = 10;

    pub fn bin_edges() -> [f64; 11] {
        std::array::from_fn(|i| i as f64 / 10.0)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows with a header line.
    pub fn to_csv(&self) -> String {
        let edges = Self::bin_edges();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(out, "{:.1},{:.1},{}", edges[i], edges[i + 1], c);
        }
        out
    }
}

/// Bin `i` holds scores in `[i/10, (i+1)/10)`; the last bin also holds 1.0.
pub fn histogram(store: &ClusteredStore) -> ScoreHistogram {
    let mut counts = [0u64; 10];
    for &s in store.mask_scores() {
        // f32 × 10 is exact in f64, so the floor lands on the true bin.
        let bin = ((s as f64) * 10.0).floor() as usize;
        counts[bin.min(ScoreHistogram::BINS - 1)] += 1;
    }
    ScoreHistogram { counts }
}
