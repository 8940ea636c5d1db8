//! Reference implementations used to cross-check the library.
//!
//! Everything here is written from the metric and search definitions directly, in plain
//! loops over f64, without reusing library internals.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ragseg_core::{ClusteredStore, Map, Metric};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- search

/// Full scan in f64, ordered by descending score, ties to the lower index.
pub fn brute_topk(store: &ClusteredStore, query: &[f32], k: usize) -> Vec<(usize, f64)> {
    let q: Vec<f64> = match store.metric() {
        Metric::Cosine => {
            let n = query.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            query.iter().map(|&x| x as f64 / n).collect()
        }
        _ => query.iter().map(|&x| x as f64).collect(),
    };
    let mut scored: Vec<(usize, f64)> = (0..store.len())
        .map(|i| {
            let c = store.centroids().row(i);
            let s = match store.metric() {
                Metric::InnerProduct | Metric::Cosine => {
                    c.iter().zip(&q).map(|(&a, &b)| a as f64 * b).sum::<f64>()
                }
                Metric::L2 => -c
                    .iter()
                    .zip(&q)
                    .map(|(&a, &b)| (a as f64 - b).powi(2))
                    .sum::<f64>(),
            };
            (i, s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Vector with entries in multiples of 1/8 within [-2, 2]; dot products and squared
/// distances of such vectors are exact in f32 for dimensions up to 64.
pub fn grid_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.random_range(-16i32..=16) as f32 / 8.0).collect()
}

/// Unit vector with `m ∈ {1, 4, 16, 64}` (m ≤ dim) entries of `±1/√m`; exact in f32.
pub fn exact_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let choices: Vec<usize> = [1usize, 4, 16, 64].into_iter().filter(|&m| m <= dim).collect();
    let m = choices[rng.random_range(0..choices.len())];
    let v = 1.0 / (m as f32).sqrt();
    let mut out = vec![0.0f32; dim];
    let mut placed = 0;
    while placed < m {
        let i = rng.random_range(0..dim);
        if out[i] == 0.0 {
            out[i] = if rng.random_bool(0.5) { v } else { -v };
            placed += 1;
        }
    }
    out
}

// ---------------------------------------------------------------- metrics

pub fn ref_mae(pred: &Map, gt: &Map) -> f64 {
    let mut s = 0.0;
    for r in 0..gt.height() {
        for c in 0..gt.width() {
            s += (pred.get(r, c) - gt.get(r, c)).abs();
        }
    }
    s / (gt.height() * gt.width()) as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance (ddof = 1); zero for fewer than two values.
fn var1(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

fn cov1(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

pub fn ref_s_measure(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = gt.shape();
    let p: Vec<f64> = pred.as_slice().to_vec();
    let g: Vec<f64> = gt.as_slice().to_vec();
    let y = mean(&g);
    if y == 0.0 {
        return (1.0 - mean(&p)).max(0.0);
    }
    if y == 1.0 {
        return mean(&p).max(0.0);
    }

    let obj_score = |vals: Vec<f64>| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let x = mean(&vals);
        let sd = var1(&vals).sqrt();
        2.0 * x / (x * x + 1.0 + sd + f64::EPSILON)
    };
    let fg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 1.0).map(|i| p[i]).collect();
    let bg: Vec<f64> = (0..p.len()).filter(|&i| g[i] == 0.0).map(|i| 1.0 - p[i]).collect();
    let object = y * obj_score(fg) + (1.0 - y) * obj_score(bg);

    // Region term: split at the rounded foreground centroid (+1).
    let mut coords = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if gt.get(r, c) == 1.0 {
                coords.push((r as f64, c as f64));
            }
        }
    }
    let cy = coords.iter().map(|t| t.0).sum::<f64>() / coords.len() as f64;
    let cx = coords.iter().map(|t| t.1).sum::<f64>() / coords.len() as f64;
    let xs = ((cx.round_ties_even() as usize) + 1).min(w);
    let ys = ((cy.round_ties_even() as usize) + 1).min(h);
    let area = (h * w) as f64;
    let weights = [
        (xs * ys) as f64 / area,
        (ys * (w - xs)) as f64 / area,
        ((h - ys) * xs) as f64 / area,
    ];
    let w4 = 1.0 - weights[0] - weights[1] - weights[2];
    let blocks = [
        (0, ys, 0, xs, weights[0]),
        (0, ys, xs, w, weights[1]),
        (ys, h, 0, xs, weights[2]),
        (ys, h, xs, w, w4),
    ];
    let mut region = 0.0;
    for (r0, r1, c0, c1, wt) in blocks {
        if r0 == r1 || c0 == c1 {
            continue;
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in r0..r1 {
            for c in c0..c1 {
                a.push(pred.get(r, c));
                b.push(gt.get(r, c));
            }
        }
        let (mx, my) = (mean(&a), mean(&b));
        let alpha = 4.0 * mx * my * cov1(&a, &b);
        let beta = (mx * mx + my * my) * (var1(&a) + var1(&b));
        let ssim = if alpha != 0.0 {
            alpha / (beta + f64::EPSILON)
        } else if beta == 0.0 {
            1.0
        } else {
            0.0
        };
        region += wt * ssim;
    }
    (0.5 * object + 0.5 * region).max(0.0)
}

/// Mean E-measure evaluated pixel by pixel at thresholds `(t + 0.5) / 256`.
pub fn ref_e_measure(pred: &Map, gt: &Map) -> f64 {
    let p = pred.as_slice();
    let g = gt.as_slice();
    let n = p.len() as f64;
    let mg = mean(g);
    let mut acc = 0.0;
    for t in 0..256 {
        let tau = (t as f64 + 0.5) / 256.0;
        let fm: Vec<f64> = p.iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
        let enhanced: f64 = if mg == 0.0 {
            fm.iter().map(|f| 1.0 - f).sum()
        } else if mg == 1.0 {
            fm.iter().sum()
        } else {
            let mf = mean(&fm);
            fm.iter()
                .zip(g)
                .map(|(&f, &gv)| {
                    let (a, b) = (f - mf, gv - mg);
                    let align = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
                    (align + 1.0) * (align + 1.0) / 4.0
                })
                .sum()
        };
        acc += enhanced / n;
    }
    acc / 256.0
}

/// Nearest foreground by exhaustive search; ties by column, then row.
pub fn ref_nearest_foreground(gt: &Map) -> Vec<Option<(u64, usize)>> {
    let (h, w) = gt.shape();
    let fg: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| gt.get(r, c) == 1.0)
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let best = fg
                .iter()
                .map(|&(fr, fc)| {
                    let d = (fr as i64 - r as i64).pow(2) + (fc as i64 - c as i64).pow(2);
                    (d as u64, fc, fr)
                })
                .min();
            out.push(best.map(|(d, fc, fr)| (d, fr * w + fc)));
        }
    }
    out
}

pub fn ref_weighted_f(pred: &Map, gt: &Map) -> f64 {
    let (h, w) = gt.shape();
    let g = gt.as_slice();
    let p = pred.as_slice();
    if g.iter().all(|&v| v == 0.0) {
        return if p.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }
    let e: Vec<f64> = (0..h * w).map(|i| (g[i] - p[i]).abs()).collect();
    let near = ref_nearest_foreground(gt);
    let et: Vec<f64> = (0..h * w)
        .map(|i| if g[i] == 1.0 { e[i] } else { e[near[i].unwrap().1] })
        .collect();

    let sigma = 5.0f64;
    let mut kern = [[0.0f64; 7]; 7];
    let mut ksum = 0.0;
    for (i, row) in kern.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            ksum += *v;
        }
    }
    let mut ea = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for (i, row) in kern.iter().enumerate() {
                for (j, kv) in row.iter().enumerate() {
                    let rr = r as i64 + i as i64 - 3;
                    let cc = c as i64 + j as i64 - 3;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        s += kv / ksum * et[rr as usize * w + cc as usize];
                    }
                }
            }
            ea[r * w + c] = s;
        }
    }

    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        if g[i] == 1.0 {
            ew[i] = e[i].min(ea[i]);
        } else {
            let d = (near[i].unwrap().0 as f64).sqrt();
            ew[i] = e[i] * (2.0 - (0.5f64.ln() / 5.0 * d).exp());
        }
    }
    let n_fg = g.iter().filter(|&&v| v == 1.0).count() as f64;
    let fg_ew: f64 = (0..h * w).filter(|&i| g[i] == 1.0).map(|i| ew[i]).sum();
    let bg_ew: f64 = (0..h * w).filter(|&i| g[i] == 0.0).map(|i| ew[i]).sum();
    let tpw = n_fg - fg_ew;
    let recall = 1.0 - fg_ew / n_fg;
    let precision = tpw / (f64::EPSILON + tpw + bg_ew);
    2.0 * recall * precision / (f64::EPSILON + recall + precision)
}

// ---------------------------------------------------------------- fixtures

/// Binary mask made of a few random ellipses.
pub fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, blobs: usize) -> Map {
    let shapes: Vec<(f64, f64, f64, f64)> = (0..blobs)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.5..h as f64 / 3.0 + 2.0),
                rng.random_range(1.5..w as f64 / 3.0 + 2.0),
            )
        })
        .collect();
    Map::from_fn(h, w, |r, c| {
        let inside = shapes.iter().any(|&(cy, cx, ry, rx)| {
            ((r as f64 - cy) / ry).powi(2) + ((c as f64 - cx) / rx).powi(2) <= 1.0
        });
        if inside { 1.0 } else { 0.0 }
    })
}

/// Noisy soft prediction around `gt`.
pub fn noisy_prediction(rng: &mut ChaCha8Rng, gt: &Map, noise: f64) -> Map {
    Map::from_fn(gt.height(), gt.width(), |r, c| {
        (0.8 * gt.get(r, c) + 0.1 + rng.random_range(-noise..noise)).clamp(0.0, 1.0)
    })
}

pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Map {
    Map::from_fn(h, w, |_, _| rng.random_range(0.0..=1.0))
}
