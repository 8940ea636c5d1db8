//! Clustering time, retrieval latency and store size as functions of `K`.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::Matrix;
use crate::error::{Error, Result};
use crate::kmeans::{timed_cluster, KMeansConfig};
use crate::search::{search_batch, search_batch_sequential, Metric};
use crate::store::RawDatabase;
use crate::tensorio::encode_store;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Tokens searched per query image; `(784 / 14)²` by default.
    pub tokens_per_query: usize,
    pub num_queries: usize,
    /// Untimed queries run before the timed ones.
    pub warmup_queries: usize,
    pub k_values: Vec<usize>,
    pub topk: usize,
    pub metric: Metric,
    pub seed: u64,
    /// Iteration cap of the clustering runs.
    pub cluster_iters: usize,
    /// Search each query's tokens on the rayon pool instead of the calling thread.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            tokens_per_query: 3136,
            num_queries: 1000,
            warmup_queries: 50,
            k_values: vec![512, 1024, 2048, 4096, 8192],
            topk: 1,
            metric: Metric::InnerProduct,
            seed: 0,
            cluster_iters: 200,
            parallel: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tokens_per_query == 0 {
            return Err(Error::InvalidArgument("tokens_per_query must be at least 1".into()));
        }
        if self.num_queries == 0 {
            return Err(Error::InvalidArgument("num_queries must be at least 1".into()));
        }
        if self.warmup_queries >= self.num_queries {
            return Err(Error::InvalidArgument(format!(
                "warm-up count {} must be below the query count {}",
                self.warmup_queries, self.num_queries
            )));
        }
        if self.k_values.is_empty() {
            return Err(Error::InvalidArgument("no K values to sweep".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub k: usize,
    pub cluster_time_s: f64,
    pub mean_query_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub store_bytes: usize,
    /// Converged objective of the clustering run.
    #[serde(skip)]
    pub objective: f64,
    #[serde(skip)]
    pub tokens_per_query: usize,
}

impl BenchRow {
    pub fn mean_token_s(&self) -> f64 {
        self.mean_query_s / self.tokens_per_query as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,cluster_time_s,mean_query_s,p50_s,p95_s,store_bytes\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.k, r.cluster_time_s, r.mean_query_s, r.p50_s, r.p95_s, r.store_bytes
            );
        }
        out
    }
}

/// Nearest-rank percentile of an ascending slice (`p` in `(0, 100]`).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn sample_query(db: &RawDatabase, tokens: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let dim = db.dim();
    let mut data = Vec::with_capacity(tokens * dim);
    for _ in 0..tokens {
        let i = rng.random_range(0..db.len());
        data.extend_from_slice(db.vectors().row(i));
    }
    Matrix::new(tokens, dim, data).expect("sampled shape")
}

pub fn run_bench(db: &RawDatabase, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut ks = cfg.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    if let Some(&max_k) = ks.last() {
        if max_k > db.len() {
            return Err(Error::KTooLarge {
                k: max_k,
                size: db.len(),
            });
        }
    }

    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let kcfg = KMeansConfig {
            k,
            max_iters: cfg.cluster_iters,
            seed: cfg.seed,
            tol: KMeansConfig::default().tol,
            metric: cfg.metric,
        };
        let (result, cluster_time_s) = timed_cluster(db, &kcfg)?;
        let store = result.store;
        let store_bytes = encode_store(&store).len();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_9e7);
        let search = |q: &Matrix| {
            if cfg.parallel {
                search_batch(&store, q, cfg.topk)
            } else {
                search_batch_sequential(&store, q, cfg.topk)
            }
        };
        for _ in 0..cfg.warmup_queries {
            let q = sample_query(db, cfg.tokens_per_query, &mut rng);
            std::hint::black_box(search(&q)?);
        }
        let mut times = Vec::with_capacity(cfg.num_queries);
        for _ in 0..cfg.num_queries {
            let q = sample_query(db, cfg.tokens_per_query, &mut rng);
            let start = Instant::now();
            let hits = search(&q)?;
            times.push(start.elapsed().as_secs_f64());
            std::hint::black_box(hits);
        }
        let mean_query_s = times.iter().sum::<f64>() / times.len() as f64;
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            k,
            cluster_time_s,
            mean_query_s,
            p50_s: nearest_rank(&times, 50.0),
            p95_s: nearest_rank(&times, 95.0),
            store_bytes,
            objective: result.objective_trace.last().copied().unwrap_or(0.0),
            tokens_per_query: cfg.tokens_per_query,
        });
    }
    Ok(BenchReport { rows })
}

/// `n` uniform random vectors in `[-1, 1)^dim` with uniform mask scores in `[0, 1]`.
pub fn synthetic_database(n: usize, dim: usize, seed: u64) -> Result<RawDatabase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors: Vec<f32> = (0..n * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let scores: Vec<f32> = (0..n).map(|_| rng.random_range(0.0f32..=1.0)).collect();
    RawDatabase::new(Matrix::new(n, dim, vectors)?, scores, n.div_ceil(256))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::store_file_size;

    #[test]
    fn nearest_rank_percentiles() {
        let v: Vec<f64> = (1..=20).map(|x| x as f64).collect();
        assert_eq!(nearest_rank(&v, 50.0), 10.0);
        assert_eq!(nearest_rank(&v, 95.0), 19.0);
        assert_eq!(nearest_rank(&v, 100.0), 20.0);
        assert_eq!(nearest_rank(&[3.0], 50.0), 3.0);
    }

    #[test]
    fn minimal_run_is_well_formed() {
        let db = synthetic_database(200, 8, 1).unwrap();
        let cfg = BenchConfig {
            tokens_per_query: 4,
            num_queries: 1,
            warmup_queries: 0,
            k_values: vec![4, 2],
            cluster_iters: 3,
            ..Default::default()
        };
        let report = run_bench(&db, &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].k, 2);
        for r in &report.rows {
            assert_eq!(r.store_bytes, store_file_size(r.k, 8));
            assert!(r.cluster_time_s > 0.0 && r.mean_query_s > 0.0);
            assert_eq!(r.p50_s, r.mean_query_s);
        }
        let csv = report.to_csv();
        assert!(csv.starts_with("k,cluster_time_s,mean_query_s,p50_s,p95_s,store_bytes\n2,"));
    }

    #[test]
    fn config_checks() {
        let db = synthetic_database(10, 2, 1).unwrap();
        let bad = BenchConfig {
            warmup_queries: 5,
            num_queries: 5,
            ..Default::default()
        };
        assert!(run_bench(&db, &bad).is_err());
        let too_big = BenchConfig {
            k_values: vec![11],
            num_queries: 1,
            warmup_queries: 0,
            ..Default::default()
        };
        assert!(matches!(run_bench(&db, &too_big), Err(Error::KTooLarge { .. })));
    }
}
