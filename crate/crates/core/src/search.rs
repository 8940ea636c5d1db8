//! Exact top-k similarity search over a [`ClusteredStore`].
//!
//! Every query is scored against every centroid. Scores are "larger is better" for all
//! metrics: L2 hits carry the negated squared distance. Hits are ordered by descending
//! score, ties by ascending centroid index.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::Matrix;
use crate::error::{Error, Result};
use crate::kernels::{scores, tile_rows};
use crate::store::ClusteredStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    InnerProduct,
    Cosine,
    L2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::InnerProduct, Metric::Cosine, Metric::L2];

    pub fn code(self) -> u8 {
        match self {
            Metric::InnerProduct => 0,
            Metric::Cosine => 1,
            Metric::L2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Metric::InnerProduct),
            1 => Ok(Metric::Cosine),
            2 => Ok(Metric::L2),
            other => Err(Error::Malformed(format!("unknown metric code {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::InnerProduct => "inner_product",
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ip" | "inner_product" | "inner-product" => Ok(Metric::InnerProduct),
            "cos" | "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric {other:?} (expected ip, cosine or l2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub index: usize,
    pub score: f32,
    pub mask_score: f32,
}

/// L2-normalizes `v` in place. Zero vectors are left unchanged.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

/// `true` when `a` ranks strictly before `b`.
#[inline]
fn ranks_before(a_score: f32, a_index: usize, b_score: f32, b_index: usize) -> bool {
    match a_score.partial_cmp(&b_score) {
        Some(Ordering::Greater) => true,
        Some(Ordering::Less) => false,
        _ => a_index < b_index,
    }
}

fn validate(store: &ClusteredStore, query: &[f32], k: usize) -> Result<()> {
    if query.len() != store.dim() {
        return Err(Error::DimMismatch {
            expected: store.dim(),
            got: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidArgument("top-k must be at least 1".into()));
    }
    if k > store.len() {
        return Err(Error::KTooLarge {
            k,
            size: store.len(),
        });
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("query"));
    }
    Ok(())
}

/// Best-first list of at most `k` `(score, index)` entries.
struct TopK {
    k: usize,
    best: Vec<(f32, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            best: Vec::with_capacity(k + 1),
        }
    }

    /// Offers candidates in ascending index order.
    #[inline]
    fn offer(&mut self, score: f32, index: usize) {
        if self.best.len() == self.k {
            let (ws, wi) = self.best[self.k - 1];
            if !ranks_before(score, index, ws, wi) {
                return;
            }
            self.best.pop();
        }
        let pos = self
            .best
            .iter()
            .position(|&(s, i)| ranks_before(score, index, s, i))
            .unwrap_or(self.best.len());
        self.best.insert(pos, (score, index));
    }

    fn into_hits(self, mask_scores: &[f32]) -> Vec<SearchHit> {
        self.best
            .into_iter()
            .map(|(score, index)| SearchHit {
                index,
                score,
                mask_score: mask_scores[index],
            })
            .collect()
    }
}

/// Scans the centroids tile by tile for every row of `queries`, so each tile is loaded
/// once per batch rather than once per query.
fn topk_block(store: &ClusteredStore, queries: &[f32], k: usize) -> Vec<Vec<SearchHit>> {
    let dim = store.dim();
    let owned;
    let queries = if store.metric() == Metric::Cosine {
        let mut q = queries.to_vec();
        for row in q.chunks_exact_mut(dim) {
            normalize(row);
        }
        owned = q;
        &owned[..]
    } else {
        queries
    };
    let negated_l2 = store.metric() == Metric::L2;
    let tile = tile_rows(dim);
    let mut lists: Vec<TopK> = (0..queries.len() / dim).map(|_| TopK::new(k)).collect();
    let mut buf = vec![0.0f32; tile];
    for (t, rows) in store.centroids().as_slice().chunks(tile * dim).enumerate() {
        let n = rows.len() / dim;
        let base = t * tile;
        for (q, list) in queries.chunks_exact(dim).zip(lists.iter_mut()) {
            scores(q, rows, negated_l2, &mut buf[..n]);
            for (j, &s) in buf[..n].iter().enumerate() {
                list.offer(s, base + j);
            }
        }
    }
    lists
        .into_iter()
        .map(|l| l.into_hits(store.mask_scores()))
        .collect()
}

/// Queries handled together by one worker.
const QUERY_BLOCK: usize = 32;

/// The `k` most similar centroids to `query`, best first.
pub fn search_topk(store: &ClusteredStore, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
    validate(store, query, k)?;
    Ok(topk_block(store, query, k).pop().expect("one query"))
}

/// One hit list per query row, in query order.
pub fn search_batch(store: &ClusteredStore, queries: &Matrix, k: usize) -> Result<Vec<Vec<SearchHit>>> {
    for q in queries.iter_rows() {
        validate(store, q, k)?;
    }
    let dim = store.dim();
    Ok(queries
        .as_slice()
        .par_chunks(QUERY_BLOCK * dim)
        .flat_map_iter(|block| topk_block(store, block, k))
        .collect())
}

/// Like [`search_batch`] but on the calling thread only.
pub fn search_batch_sequential(
    store: &ClusteredStore,
    queries: &Matrix,
    k: usize,
) -> Result<Vec<Vec<SearchHit>>> {
    for q in queries.iter_rows() {
        validate(store, q, k)?;
    }
    let dim = store.dim();
    Ok(queries
        .as_slice()
        .chunks(QUERY_BLOCK * dim)
        .flat_map(|block| topk_block(store, block, k))
        .collect())
}
