//! Lloyd's k-means with k-means++ seeding, used to compress a [`RawDatabase`] into a
//! [`ClusteredStore`].
//!
//! Clustering always runs in squared-L2 geometry. For the cosine metric the input vectors
//! are L2-normalized first and every centroid is re-normalized after each update
//! (spherical k-means), which keeps the objective non-increasing.
//!
//! The assignment step is parallel over points; every reduction runs in point order on a
//! single thread, so results are bit-identical for any worker count.

use std::borrow::Cow;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::array::Matrix;
use crate::error::{Error, Result};
use crate::kernels::{nearest, scores, squared_l2, tile_rows};
use crate::search::{normalize, Metric};
use crate::store::{ClusteredStore, RawDatabase};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    pub seed: u64,
    /// Stop once the largest relative centroid shift falls below this.
    pub tol: f64,
    pub metric: Metric,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 4096,
            max_iters: 200,
            seed: 0,
            tol: 1e-6,
            metric: Metric::InnerProduct,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub store: ClusteredStore,
    /// Sum of squared distances from each point to its centroid, after each update.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
    /// Cluster index of every input pair.
    pub assignments: Vec<u32>,
}

impl KMeansResult {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(0.0)
    }

    /// `iter,objective` rows with a header line.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iter,objective\n");
        for (i, v) in self.objective_trace.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }
}

pub fn cluster(db: &RawDatabase, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = db.len();
    if n == 0 {
        return Err(Error::Empty("cannot cluster an empty database"));
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if cfg.k > n {
        return Err(Error::KTooLarge { k: cfg.k, size: n });
    }
    if cfg.k > u32::MAX as usize {
        return Err(Error::InvalidArgument("k does not fit in 32 bits".into()));
    }
    if cfg.max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    if cfg.tol.is_nan() || cfg.tol < 0.0 {
        return Err(Error::InvalidArgument("tol must be non-negative".into()));
    }
    if !db.vectors().is_finite() {
        return Err(Error::NonFinite("database vectors"));
    }

    let spherical = cfg.metric == Metric::Cosine;
    let data: Cow<'_, Matrix> = if spherical {
        let mut m = db.vectors().clone();
        for i in 0..m.rows() {
            normalize(m.row_mut(i));
        }
        Cow::Owned(m)
    } else {
        Cow::Borrowed(db.vectors())
    };
    let data = data.as_ref();
    let dim = data.cols();
    let k = cfg.k;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = seed_plus_plus(data, k, &mut rng);

    let mut assign: Vec<u32> = vec![u32::MAX; n];
    let mut trace: Vec<f64> = Vec::new();

    for iter in 0..cfg.max_iters {
        let (mut next, mut dist) = nearest_centroids(data, &centroids, k);
        if iter > 0 && next == assign {
            break;
        }
        repair_empty(&mut next, &mut dist, k);
        let updated = update_centroids(data, &next, k, spherical);
        let cost = objective(data, &updated, &next);
        if trace.last().is_some_and(|&prev| cost > prev) {
            // Only rounding can raise the objective; keep the previous solution.
            break;
        }
        let shift = max_relative_shift(&centroids, &updated, dim);
        trace.push(cost);
        centroids = updated;
        assign = next;
        if shift < cfg.tol {
            break;
        }
    }

    let scores = member_mask_means(db.mask_scores(), &assign, k);
    let store = ClusteredStore::new(Matrix::new(k, dim, centroids)?, scores, cfg.metric, spherical)?;
    Ok(KMeansResult {
        store,
        iterations_run: trace.len(),
        objective_trace: trace,
        assignments: assign,
    })
}

/// [`cluster`] plus its wall-clock duration in seconds (monotonic clock).
pub fn timed_cluster(db: &RawDatabase, cfg: &KMeansConfig) -> Result<(KMeansResult, f64)> {
    let start = Instant::now();
    let result = cluster(db, cfg)?;
    Ok((result, start.elapsed().as_secs_f64()))
}

/// Relative slack on the pruning bound, far above the rounding error of the distances.
const PRUNE_SLACK: f32 = 1e-3;

/// Points per pruning decision in the seeding pass.
const SEED_BLOCK: usize = 64;

fn seed_plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.rows();
    let dim = data.cols();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];

    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(data.row(first));
    let mut min_d: Vec<f32> = (0..n)
        .into_par_iter()
        .map(|i| squared_l2(data.row(i), data.row(first)))
        .collect();
    let mut closest = vec![0u32; n];
    let mut center_d = vec![0.0f32; k];

    for m in 1..k {
        let total: f64 = min_d.iter().map(|&d| d as f64).sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0f64;
            let mut pick = None;
            let mut last_positive = None;
            for (i, &d) in min_d.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                last_positive = Some(i);
                acc += d as f64;
                if acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.or(last_positive).expect("positive total implies a positive weight")
        } else {
            // Every remaining point coincides with a chosen centre.
            chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen[pick] = true;
        let c = data.row(pick);
        scores(c, &centroids, true, &mut center_d[..m]);
        centroids.extend_from_slice(c);

        // A point cannot move to the new centre when the centre is at least twice as far
        // from the point's current centre as the point itself.
        min_d
            .par_chunks_mut(SEED_BLOCK)
            .zip(closest.par_chunks_mut(SEED_BLOCK))
            .zip(data.as_slice().par_chunks(SEED_BLOCK * dim))
            .for_each_init(
                || vec![0.0f32; SEED_BLOCK],
                |buf, ((d, near), points)| {
                    let pruned = d
                        .iter()
                        .zip(near.iter())
                        .all(|(&d, &j)| -center_d[j as usize] >= 4.0 * d * (1.0 + PRUNE_SLACK));
                    if pruned {
                        return;
                    }
                    let out = &mut buf[..d.len()];
                    scores(c, points, true, out);
                    for ((d, near), &nd) in d.iter_mut().zip(near.iter_mut()).zip(out.iter()) {
                        if -nd < *d {
                            *d = -nd;
                            *near = m as u32;
                        }
                    }
                },
            );
    }
    centroids
}

/// Points handled per work item of the assignment step.
const POINT_BLOCK: usize = 256;

fn nearest_centroids(data: &Matrix, centroids: &[f32], k: usize) -> (Vec<u32>, Vec<f32>) {
    let dim = data.cols();
    let tile = tile_rows(dim);
    let mut best = vec![(0u32, f32::INFINITY); data.rows()];
    best.par_chunks_mut(POINT_BLOCK)
        .zip(data.as_slice().par_chunks(POINT_BLOCK * dim))
        .for_each(|(slot, points)| {
            for (t, tile_rows) in centroids[..k * dim].chunks(tile * dim).enumerate() {
                nearest(points, tile_rows, (t * tile) as u32, dim, slot);
            }
        });
    best.into_iter().unzip()
}

/// Moves the points farthest from their centroids into empty clusters.
fn repair_empty(assign: &mut [u32], dist: &mut [f32], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assign.iter() {
        counts[a as usize] += 1;
    }
    let empty: Vec<usize> = (0..k).filter(|&j| counts[j] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..assign.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut cursor = order.into_iter();
    for j in empty {
        for p in cursor.by_ref() {
            let from = assign[p] as usize;
            if counts[from] > 1 {
                counts[from] -= 1;
                counts[j] += 1;
                assign[p] = j as u32;
                dist[p] = 0.0;
                break;
            }
        }
    }
}

fn update_centroids(data: &Matrix, assign: &[u32], k: usize, spherical: bool) -> Vec<f32> {
    let dim = data.cols();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    let mut first_member = vec![usize::MAX; k];
    for (i, &a) in assign.iter().enumerate() {
        let a = a as usize;
        counts[a] += 1;
        if first_member[a] == usize::MAX {
            first_member[a] = i;
        }
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(data.row(i)) {
            *s += x as f64;
        }
    }
    let mut out = vec![0.0f32; k * dim];
    for j in 0..k {
        let sum = &sums[j * dim..(j + 1) * dim];
        let dst = &mut out[j * dim..(j + 1) * dim];
        let count = counts[j] as f64;
        if spherical {
            let norm = sum.iter().map(|s| s * s).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (d, s) in dst.iter_mut().zip(sum) {
                    *d = (s / norm) as f32;
                }
            } else {
                // Any unit vector is optimal when the members cancel out.
                dst.copy_from_slice(data.row(first_member[j]));
            }
        } else {
            for (d, s) in dst.iter_mut().zip(sum) {
                *d = (s / count) as f32;
            }
        }
    }
    out
}

fn objective(data: &Matrix, centroids: &[f32], assign: &[u32]) -> f64 {
    let dim = data.cols();
    let per_point: Vec<f32> = assign
        .par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let a = a as usize;
            squared_l2(data.row(i), &centroids[a * dim..(a + 1) * dim])
        })
        .collect();
    per_point.iter().map(|&d| d as f64).sum()
}

fn max_relative_shift(old: &[f32], new: &[f32], dim: usize) -> f64 {
    old.chunks_exact(dim)
        .zip(new.chunks_exact(dim))
        .map(|(a, b)| {
            let shift = squared_l2(a, b) as f64;
            let base = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>();
            (shift / base.max(f64::MIN_POSITIVE)).sqrt()
        })
        .fold(0.0, f64::max)
}

fn member_mask_means(scores: &[f32], assign: &[u32], k: usize) -> Vec<f32> {
    let mut sum = vec![0.0f64; k];
    let mut count = vec![0usize; k];
    let mut lo = vec![f32::INFINITY; k];
    let mut hi = vec![f32::NEG_INFINITY; k];
    for (&s, &a) in scores.iter().zip(assign) {
        let a = a as usize;
        sum[a] += s as f64;
        count[a] += 1;
        lo[a] = lo[a].min(s);
        hi[a] = hi[a].max(s);
    }
    (0..k)
        .map(|j| ((sum[j] / count[j] as f64) as f32).clamp(lo[j], hi[j]))
        .collect()
}
