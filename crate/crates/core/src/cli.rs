//! The `ragseg` command line.
//!
//! Exit codes: 0 success, 1 invalid arguments, 2 data errors, 3 I/O errors. Failures
//! print a single diagnostic line on standard error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::array::{Map, Matrix};
use crate::bench::{run_bench, synthetic_database, BenchConfig};
use crate::error::{Error, Result};
use crate::kmeans::{cluster, KMeansConfig};
use crate::metrics::evaluate_dir;
use crate::pgm::write_pgm;
use crate::prompts::{extract_prompts, write_prompts, PromptConfig};
use crate::pseudolabel::{generate, QueryGrid, Threshold};
use crate::search::Metric;
use crate::store::{histogram, ingest, merge, pool_mask, RawDatabase};
use crate::tensorio::{read_store, read_tensor, write_store, write_tensor, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable capping the worker count (0 = automatic).
pub const THREADS_ENV: &str = "RAGSEG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "ragseg",
    version,
    about = "Training-free retrieval pseudo-labels for camouflaged/salient object segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a clustered vector/mask store from paired feature and mask tensors.
    BuildDb(BuildDbArgs),
    /// Produce a pseudo-label for one query image's patch tokens.
    Query(QueryArgs),
    /// Turn a pseudo-label into mask and point prompts.
    Prompts(PromptsArgs),
    /// Score predictions against ground-truth masks.
    Eval(EvalArgs),
    /// Measure clustering time, retrieval latency and store size over K.
    Bench(BenchArgs),
    /// Concatenate two stores without re-clustering.
    Merge(MergeArgs),
    /// Histogram of centroid mask scores over ten uniform bins.
    Hist(HistArgs),
}

#[derive(Debug, Args)]
pub struct BuildDbArgs {
    /// Directory of `<stem>.rsgt` feature tensors (T × D, f32, no class token).
    #[arg(long, value_name = "DIR")]
    pub features: PathBuf,
    /// Directory of `<stem>.rsgt` masks: T token values, a g × g grid, or an H × W mask.
    #[arg(long, value_name = "DIR")]
    pub masks: PathBuf,
    /// Number of clusters K.
    #[arg(long, default_value_t = 4096)]
    pub k: usize,
    /// Maximum k-means iterations.
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    /// RNG seed for k-means++ seeding.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Retrieval metric: ip, cosine or l2.
    #[arg(long, default_value = "ip")]
    pub metric: Metric,
    /// Output store (RSDB).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Optional `iter,objective` CSV of the k-means objective.
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Clustered store (RSDB).
    #[arg(long, value_name = "PATH")]
    pub store: PathBuf,
    /// Query token tensor (G² × D, f32, row-major grid order).
    #[arg(long, value_name = "PATH")]
    pub features: PathBuf,
    /// Token grid side G.
    #[arg(long)]
    pub grid: usize,
    /// Query image resolution, `HxW` (each 14 × G).
    #[arg(long, value_name = "HxW", value_parser = parse_resolution)]
    pub resolution: (usize, usize),
    /// Number of retrieved centroids averaged per token.
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    /// Post-processing: T0..T9, TN, or a value in (0, 1).
    #[arg(long, default_value = "T3")]
    pub threshold: Threshold,
    /// Output pseudo-label (RSGT, f32 H × W).
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Also write an 8-bit PGM preview.
    #[arg(long, value_name = "PATH")]
    pub pgm: Option<PathBuf>,
    /// Accepted for uniformity; the query path is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Pseudo-label (RSGT H × W).
    #[arg(long, value_name = "PATH")]
    pub pseudo: PathBuf,
    /// Output prompts JSON; the mask prompt is written next to it as `<stem>.mask.rsgt`.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Positive point threshold.
    #[arg(long, default_value_t = 0.95)]
    pub t_pos: f64,
    /// Negative point threshold.
    #[arg(long, default_value_t = 0.005)]
    pub t_neg: f64,
    /// Mask prompt threshold.
    #[arg(long, default_value_t = 0.3)]
    pub mask_tau: f64,
    /// Maximum points per polarity.
    #[arg(long, default_value_t = 10)]
    pub max_points: usize,
    /// Accepted for uniformity; prompt extraction is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predictions (`.rsgt` or `.pgm`).
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory of ground-truth masks (`.pgm` or `.rsgt`).
    #[arg(long, value_name = "DIR")]
    pub gt: PathBuf,
    /// Write the full report as JSON.
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    /// Write per-image rows as CSV.
    #[arg(long, value_name = "PATH")]
    pub csv: Option<PathBuf>,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of feature tensors (with --masks) to benchmark on.
    #[arg(long, value_name = "DIR", requires = "masks", conflicts_with = "synthetic")]
    pub features: Option<PathBuf>,
    /// Directory of mask tensors paired with --features.
    #[arg(long, value_name = "DIR")]
    pub masks: Option<PathBuf>,
    /// Use N random vectors instead of a feature directory.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Dimension of synthetic vectors.
    #[arg(long, default_value_t = 384)]
    pub dim: usize,
    /// Comma-separated K values.
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096,8192")]
    pub k_values: Vec<usize>,
    /// Timed queries per K.
    #[arg(long, default_value_t = 1000)]
    pub num_queries: usize,
    /// Untimed warm-up queries per K.
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    /// Tokens per query, (784/14)² by default.
    #[arg(long, default_value_t = 3136)]
    pub tokens_per_query: usize,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    #[arg(long, default_value = "ip")]
    pub metric: Metric,
    /// k-means iteration cap.
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Search tokens on all workers (throughput mode).
    #[arg(long)]
    pub parallel: bool,
    /// Output CSV; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// First store; its entries come first.
    pub a: PathBuf,
    /// Second store.
    pub b: PathBuf,
    /// Output store.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
    /// Accepted for uniformity; merging is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    /// Store to analyse.
    #[arg(long, value_name = "PATH")]
    pub store: PathBuf,
    /// Output CSV (`bin_lo,bin_hi,count`); standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Accepted for uniformity; the histogram is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_resolution(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    Ok((h, w))
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let msg = e.render().to_string();
                    let first = msg.lines().next().unwrap_or("invalid arguments");
                    let _ = writeln!(stderr, "{first}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Sizes the global worker pool from `RAGSEG_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}={value:?} is not a number")))?;
    if n > 0 {
        // Fails only if the pool already exists, in which case its size stands.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::BuildDb(a) => build_db(a, stdout),
        Command::Query(a) => query(a),
        Command::Prompts(a) => prompts(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Bench(a) => bench(a, stdout),
        Command::Merge(a) => merge_cmd(a, stdout),
        Command::Hist(a) => hist(a, stdout),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn rsgt_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("rsgt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Converts a mask tensor into one value per token of a `tokens`-long square grid.
fn token_mask(mask: &Tensor, tokens: usize) -> Result<Vec<f32>> {
    let g = tokens.isqrt();
    match mask.dims() {
        [n] if *n == tokens => Ok(mask.to_f32_vec()),
        [h, w] if *h == g && *w == g => Ok(mask.to_f32_vec()),
        [_, _] => {
            let map = mask.to_map()?;
            Ok(pool_mask(&map, g)?.as_slice().iter().map(|&v| v as f32).collect())
        }
        dims => Err(Error::Shape(format!(
            "mask of shape {dims:?} cannot cover {tokens} tokens"
        ))),
    }
}

/// Loads stem-paired features and masks into a database, in stem order.
pub fn load_database(features: &Path, masks: &Path) -> Result<RawDatabase> {
    let feats = rsgt_stems(features)?;
    let mask_files = rsgt_stems(masks)?;
    if feats.is_empty() {
        return Err(Error::Empty("no feature tensors found"));
    }
    let mut mats = Vec::with_capacity(feats.len());
    let mut token_masks = Vec::with_capacity(feats.len());
    for (stem, fpath) in &feats {
        let mpath = mask_files
            .get(stem)
            .ok_or_else(|| Error::MissingCounterpart(format!("mask for {stem}")))?;
        let f = read_tensor(fpath)?.to_matrix()?;
        let m = token_mask(&read_tensor(mpath)?, f.rows())?;
        mats.push(f);
        token_masks.push(m);
    }
    ingest(&mats, &token_masks)
}

fn build_db(a: BuildDbArgs, stdout: &mut dyn Write) -> Result<()> {
    let db = load_database(&a.features, &a.masks)?;
    let cfg = KMeansConfig {
        k: a.k,
        max_iters: a.iters,
        seed: a.seed,
        metric: a.metric,
        ..KMeansConfig::default()
    };
    let result = cluster(&db, &cfg)?;
    write_store(&a.out, &result.store)?;
    if let Some(trace) = &a.trace {
        write_text(trace, &result.trace_csv())?;
    }
    let _ = writeln!(
        stdout,
        "pairs={} K={} iters={} objective={}",
        db.len(),
        result.store.len(),
        result.iterations_run,
        result.final_objective()
    );
    Ok(())
}

fn query(a: QueryArgs) -> Result<()> {
    let store = read_store(&a.store)?;
    let tokens: Matrix = read_tensor(&a.features)?.to_matrix()?;
    let grid = QueryGrid::new(tokens, a.grid, a.resolution)?;
    let label = generate(&store, &grid, a.topk)?.apply_threshold(a.threshold);
    write_tensor(&a.out, &Tensor::from_map(&label.values)?)?;
    if let Some(pgm) = &a.pgm {
        write_pgm(pgm, &label.values)?;
    }
    Ok(())
}

fn prompts(a: PromptsArgs, stdout: &mut dyn Write) -> Result<()> {
    let map: Map = read_tensor(&a.pseudo)?.to_map()?;
    let cfg = PromptConfig {
        t_pos: a.t_pos,
        t_neg: a.t_neg,
        mask_tau: a.mask_tau,
        max_points: a.max_points,
    };
    cfg.validate()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ps = extract_prompts(&map, &cfg)?;
    write_prompts(&ps, &a.out)?;
    let _ = writeln!(
        stdout,
        "positives={} negatives={}",
        ps.positives().count(),
        ps.negatives().count()
    );
    Ok(())
}

fn eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<()> {
    let report = evaluate_dir(&a.pred, &a.gt)?;
    if let Some(p) = &a.json {
        write_text(p, &report.to_json())?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    let g = &report.aggregate;
    let _ = writeln!(
        stdout,
        "images={} s_alpha={:.4} e_xi={:.4} f_beta_w={:.4} mae={:.4}",
        report.per_image.len(),
        g.s_alpha,
        g.e_xi,
        g.f_beta_w,
        g.mae
    );
    Ok(())
}

fn bench(a: BenchArgs, stdout: &mut dyn Write) -> Result<()> {
    let db = match (&a.features, &a.masks, a.synthetic) {
        (Some(f), Some(m), None) => load_database(f, m)?,
        (None, _, Some(n)) => synthetic_database(n, a.dim, a.seed)?,
        _ => {
            return Err(Error::InvalidArgument(
                "give either --features/--masks or --synthetic N".into(),
            ))
        }
    };
    let cfg = BenchConfig {
        tokens_per_query: a.tokens_per_query,
        num_queries: a.num_queries,
        warmup_queries: a.warmup,
        k_values: a.k_values,
        topk: a.topk,
        metric: a.metric,
        seed: a.seed,
        cluster_iters: a.iters,
        parallel: a.parallel,
    };
    cfg.validate()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let csv = run_bench(&db, &cfg)?.to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            let _ = write!(stdout, "{csv}");
            Ok(())
        }
    }
}

fn merge_cmd(a: MergeArgs, stdout: &mut dyn Write) -> Result<()> {
    let sa = read_store(&a.a)?;
    let sb = read_store(&a.b)?;
    let merged = merge(&sa, &sb)?;
    write_store(&a.out, &merged)?;
    let _ = writeln!(stdout, "K={} (K_a={} + K_b={})", merged.len(), sa.len(), sb.len());
    Ok(())
}

fn hist(a: HistArgs, stdout: &mut dyn Write) -> Result<()> {
    let store = read_store(&a.store)?;
    let csv = histogram(&store).to_csv();
    match &a.out {
        Some(p) => write_text(p, &csv),
        None => {
            let _ = write!(stdout, "{csv}");
            Ok(())
        }
    }
}
