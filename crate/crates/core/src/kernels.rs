//! Dense f32 kernels shared by search and clustering.
//!
//! Each kernel accumulates in eight lanes in the same order regardless of instruction
//! set, so the AVX2 build and the portable build return bit-identical results.

#[inline(always)]
fn dot_body(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f32>() + tail
}

#[inline(always)]
fn squared_l2_body(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    for (x, y) in ca.iter().zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    acc.iter().sum::<f32>() + tail
}

/// Squared distances from four points to one row, each lane computed as in
/// [`squared_l2_body`].
#[inline(always)]
fn squared_l2_x4_body(p: [&[f32]; 4], c: &[f32]) -> [f32; 4] {
    let mut acc = [[0.0f32; 8]; 4];
    let (cc, rc) = c.as_chunks::<8>();
    let chunks = p.map(|x| x.as_chunks::<8>().0);
    for (i, y) in cc.iter().enumerate() {
        for (a, x) in acc.iter_mut().zip(&chunks) {
            let x = &x[i];
            for l in 0..8 {
                let d = x[l] - y[l];
                a[l] += d * d;
            }
        }
    }
    let base = cc.len() * 8;
    let mut out = [0.0f32; 4];
    for j in 0..4 {
        let mut tail = 0.0f32;
        for (t, y) in rc.iter().enumerate() {
            let d = p[j][base + t] - y;
            tail += d * d;
        }
        out[j] = acc[j].iter().sum::<f32>() + tail;
    }
    out
}

#[inline(always)]
fn scores_body(query: &[f32], rows: &[f32], negated_l2: bool, out: &mut [f32]) {
    let dim = query.len();
    for (o, row) in out.iter_mut().zip(rows.chunks_exact(dim)) {
        *o = if negated_l2 {
            -squared_l2_body(query, row)
        } else {
            dot_body(query, row)
        };
    }
}

#[inline(always)]
fn nearest_body(points: &[f32], centroids: &[f32], first: u32, dim: usize, best: &mut [(u32, f32)]) {
    let mut blocks = points.chunks_exact(4 * dim);
    let mut slots = best.chunks_exact_mut(4);
    for (block, slot) in (&mut blocks).zip(&mut slots) {
        let p = [
            &block[..dim],
            &block[dim..2 * dim],
            &block[2 * dim..3 * dim],
            &block[3 * dim..],
        ];
        for (j, c) in centroids.chunks_exact(dim).enumerate() {
            let d = squared_l2_x4_body(p, c);
            for l in 0..4 {
                if d[l] < slot[l].1 {
                    slot[l] = (first + j as u32, d[l]);
                }
            }
        }
    }
    for (x, slot) in blocks.remainder().chunks_exact(dim).zip(slots.into_remainder()) {
        for (j, c) in centroids.chunks_exact(dim).enumerate() {
            let d = squared_l2_body(x, c);
            if d < slot.1 {
                *slot = (first + j as u32, d);
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;

    /// Sums the eight lanes in index order, like `[f32; 8]::iter().sum()`.
    #[inline]
    #[target_feature(enable = "avx2")]
    fn lane_sum(v: __m256) -> f32 {
        let mut lanes = [0.0f32; 8];
        // SAFETY: `lanes` holds eight f32.
        unsafe { _mm256_storeu_ps(lanes.as_mut_ptr(), v) };
        lanes.iter().sum()
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    fn load(chunk: &[f32; 8]) -> __m256 {
        // SAFETY: the chunk holds eight f32.
        unsafe { _mm256_loadu_ps(chunk.as_ptr()) }
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    fn dot(a: &[f32], b: &[f32]) -> f32 {
        let (ca, ra) = a.as_chunks::<8>();
        let (cb, rb) = b.as_chunks::<8>();
        let mut acc = _mm256_setzero_ps();
        for (x, y) in ca.iter().zip(cb) {
            acc = _mm256_add_ps(acc, _mm256_mul_ps(load(x), load(y)));
        }
        let mut tail = 0.0f32;
        for (x, y) in ra.iter().zip(rb) {
            tail += x * y;
        }
        lane_sum(acc) + tail
    }

    #[inline]
    #[target_feature(enable = "avx2")]
    pub(super) fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
        let (ca, ra) = a.as_chunks::<8>();
        let (cb, rb) = b.as_chunks::<8>();
        let mut acc = _mm256_setzero_ps();
        for (x, y) in ca.iter().zip(cb) {
            let d = _mm256_sub_ps(load(x), load(y));
            acc = _mm256_add_ps(acc, _mm256_mul_ps(d, d));
        }
        let mut tail = 0.0f32;
        for (x, y) in ra.iter().zip(rb) {
            let d = x - y;
            tail += d * d;
        }
        lane_sum(acc) + tail
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn scores(query: &[f32], rows: &[f32], negated_l2: bool, out: &mut [f32]) {
        let dim = query.len();
        let full = dim / 8 * 8;
        let mut blocks = rows.chunks_exact(4 * dim);
        let mut outs = out.chunks_exact_mut(4);
        for (block, o4) in (&mut blocks).zip(&mut outs) {
            let r: [&[f32]; 4] = [
                &block[..dim],
                &block[dim..2 * dim],
                &block[2 * dim..3 * dim],
                &block[3 * dim..],
            ];
            let mut acc = [_mm256_setzero_ps(); 4];
            let mut o = 0;
            while o < full {
                // SAFETY: `o + 8 <= full <= dim`, the length of the query and every row.
                unsafe {
                    let q = _mm256_loadu_ps(query.as_ptr().add(o));
                    for l in 0..4 {
                        let x = _mm256_loadu_ps(r[l].as_ptr().add(o));
                        let t = if negated_l2 {
                            let d = _mm256_sub_ps(q, x);
                            _mm256_mul_ps(d, d)
                        } else {
                            _mm256_mul_ps(q, x)
                        };
                        acc[l] = _mm256_add_ps(acc[l], t);
                    }
                }
                o += 8;
            }
            for l in 0..4 {
                let mut tail = 0.0f32;
                for t in full..dim {
                    tail += if negated_l2 {
                        let d = query[t] - r[l][t];
                        d * d
                    } else {
                        query[t] * r[l][t]
                    };
                }
                let v = lane_sum(acc[l]) + tail;
                o4[l] = if negated_l2 { -v } else { v };
            }
        }
        for (o, row) in outs.into_remainder().iter_mut().zip(blocks.remainder().chunks_exact(dim)) {
            *o = if negated_l2 { -squared_l2(query, row) } else { dot(query, row) };
        }
    }

    #[target_feature(enable = "avx2")]
    pub(super) fn nearest(points: &[f32], centroids: &[f32], first: u32, dim: usize, best: &mut [(u32, f32)]) {
        let mut blocks = points.chunks_exact(4 * dim);
        let mut slots = best.chunks_exact_mut(4);
        let full = dim / 8 * 8;
        for (block, slot) in (&mut blocks).zip(&mut slots) {
            let p: [&[f32]; 4] = [
                &block[..dim],
                &block[dim..2 * dim],
                &block[2 * dim..3 * dim],
                &block[3 * dim..],
            ];
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                let (mut a0, mut a1, mut a2, mut a3) = (
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                    _mm256_setzero_ps(),
                );
                let mut o = 0;
                while o < full {
                    // SAFETY: `o + 8 <= full <= dim`, the length of every row.
                    unsafe {
                        let y = _mm256_loadu_ps(c.as_ptr().add(o));
                        let d0 = _mm256_sub_ps(_mm256_loadu_ps(p[0].as_ptr().add(o)), y);
                        let d1 = _mm256_sub_ps(_mm256_loadu_ps(p[1].as_ptr().add(o)), y);
                        let d2 = _mm256_sub_ps(_mm256_loadu_ps(p[2].as_ptr().add(o)), y);
                        let d3 = _mm256_sub_ps(_mm256_loadu_ps(p[3].as_ptr().add(o)), y);
                        a0 = _mm256_add_ps(a0, _mm256_mul_ps(d0, d0));
                        a1 = _mm256_add_ps(a1, _mm256_mul_ps(d1, d1));
                        a2 = _mm256_add_ps(a2, _mm256_mul_ps(d2, d2));
                        a3 = _mm256_add_ps(a3, _mm256_mul_ps(d3, d3));
                    }
                    o += 8;
                }
                let acc = [a0, a1, a2, a3];
                for l in 0..4 {
                    let mut tail = 0.0f32;
                    for t in full..dim {
                        let d = p[l][t] - c[t];
                        tail += d * d;
                    }
                    let d = lane_sum(acc[l]) + tail;
                    if d < slot[l].1 {
                        slot[l] = (first + j as u32, d);
                    }
                }
            }
        }
        for (x, slot) in blocks.remainder().chunks_exact(dim).zip(slots.into_remainder()) {
            for (j, c) in centroids.chunks_exact(dim).enumerate() {
                let d = squared_l2(x, c);
                if d < slot.1 {
                    *slot = (first + j as u32, d);
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn has_avx2() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

#[cfg(test)]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    dot_body(a, b)
}

#[inline]
pub(crate) fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::squared_l2(a, b) };
    }
    squared_l2_body(a, b)
}

/// Scores `query` against each `query.len()`-wide row of `rows`: the inner product, or
/// the negated squared distance when `negated_l2` is set.
pub(crate) fn scores(query: &[f32], rows: &[f32], negated_l2: bool, out: &mut [f32]) {
    debug_assert_eq!(rows.len(), out.len() * query.len());
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::scores(query, rows, negated_l2, out) };
    }
    scores_body(query, rows, negated_l2, out)
}

/// Updates `best[i]` with the nearest row of `centroids` for each row `i` of `points`.
///
/// Centroid `j` of the slice is reported as `first + j`; only strictly smaller distances
/// replace the current entry, so scanning tiles in order keeps the lowest index on ties.
pub(crate) fn nearest(points: &[f32], centroids: &[f32], first: u32, dim: usize, best: &mut [(u32, f32)]) {
    debug_assert_eq!(points.len(), best.len() * dim);
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { avx2::nearest(points, centroids, first, dim, best) };
    }
    nearest_body(points, centroids, first, dim, best)
}

/// Rows per tile so that one tile of `dim`-wide rows stays around 64 KiB.
pub(crate) fn tile_rows(dim: usize) -> usize {
    (16 * 1024 / dim.max(1)).max(1)
}
