//! Naive reference implementations and fixture helpers shared by integration
//! tests (also used by the CLI acceptance suite).
#![allow(dead_code, clippy::needless_range_loop)]

use okp_core::feature_io::FeatureMap;

/// Deterministic pseudo-random map for tests that need many maps quickly.
pub fn seeded_map(rows: usize, cols: usize, d: usize, seed: u64) -> FeatureMap {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    let data = (0..rows * cols * d)
        .map(|_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0) as f32
        })
        .collect();
    FeatureMap::from_grid(rows, cols, d, data).unwrap()
}

fn at(map: &FeatureMap, r: isize, c: isize) -> &[f32] {
    let r = r.clamp(0, map.rows() as isize - 1) as usize;
    let c = c.clamp(0, map.cols() as isize - 1) as usize;
    map.at(r, c)
}

/// Objectness attention written out cell by cell.
pub fn naive_attention(map: &FeatureMap, alpha: f64) -> Vec<f32> {
    let d = map.channels();
    let mut o = Vec::new();
    for i in 0..map.cells() {
        let mut s = 0f64;
        for v in map.cell(i) {
            s += v.abs() as f64;
        }
        o.push(s / d as f64);
    }
    let lo = o.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = o.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Vec::new();
    for i in 0..map.cells() {
        let norm = if hi > lo {
            (2.0 * (o[i] - lo) / (hi - lo) - 1.0) as f32
        } else {
            0.0
        };
        let scale = (1.0 / (1.0 + (-(alpha * norm as f64)).exp())) as f32;
        for v in map.cell(i) {
            out.push(v * scale);
        }
    }
    out
}

/// 3×3 replicate-border mean of a `rows × cols × d` buffer.
pub fn naive_pool(data: &[f32], rows: usize, cols: usize, d: usize) -> Vec<f32> {
    let map = FeatureMap::from_grid(rows, cols, d, data.to_vec()).unwrap();
    let mut out = Vec::new();
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for ch in 0..d {
                let mut s = 0f64;
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        s += at(&map, r + dr, c + dc)[ch] as f64;
                    }
                }
                out.push((s / 9.0) as f32);
            }
        }
    }
    out
}

/// Full 17-block descriptor of cell `(r, c)` gathered directly.
pub fn naive_binned_cell(map: &FeatureMap, alpha: f64, r: usize, c: usize) -> Vec<f32> {
    let (rows, cols, d) = (map.rows(), map.cols(), map.channels());
    let att = FeatureMap::from_grid(rows, cols, d, naive_attention(map, alpha)).unwrap();
    let pooled =
        FeatureMap::from_grid(rows, cols, d, naive_pool(att.data(), rows, cols, d)).unwrap();
    let (r, c) = (r as isize, c as isize);
    let mut out = at(&att, r, c).to_vec();
    let offsets = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    for (dr, dc) in offsets {
        out.extend_from_slice(at(&att, r + dr, c + dc));
    }
    for (dr, dc) in offsets {
        out.extend_from_slice(at(&pooled, r + 3 * dr, c + 3 * dc));
    }
    out
}

pub fn naive_cosine(x: &[f32], y: &[f32]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| *a as f64 * *b as f64).sum();
    let nx: f64 = x.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let ny: f64 = y.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        -1.0
    } else {
        dot / (nx * ny)
    }
}

/// `S[i][j]` between all support and query cells, double loop.
pub fn naive_similarity(support: &FeatureMap, query: &FeatureMap) -> Vec<Vec<f64>> {
    (0..support.cells())
        .map(|i| {
            (0..query.cells())
                .map(|j| naive_cosine(support.cell(i), query.cell(j)))
                .collect()
        })
        .collect()
}

/// Column-wise argmax; first maximum wins.
pub fn naive_argmax(s: &[Vec<f32>]) -> Vec<usize> {
    let cols = s[0].len();
    (0..cols)
        .map(|j| {
            let mut best = 0;
            for i in 0..s.len() {
                if s[i][j] > s[best][j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Background cell at least 6 cells away from every planted object.
pub fn background_cell(fx: &okp_core::synth::SynthFixture) -> okp_core::GridIndex {
    let q = &fx.query;
    let (rows, cols) = (q.rows(), q.cols());
    let side = fx
        .keypoint_offsets
        .iter()
        .map(|o| o.0.max(o.1))
        .max()
        .unwrap()
        + 6;
    let clear = |r: usize, c: usize| {
        fx.placements.iter().all(|&(r0, c0)| {
            let dr = r0.saturating_sub(r).max(r.saturating_sub(r0 + side - 1));
            let dc = c0.saturating_sub(c).max(c.saturating_sub(c0 + side - 1));
            dr.max(dc) >= 6
        })
    };
    let (r, c) = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .find(|&(r, c)| clear(r, c))
        .expect("no free background cell");
    okp_core::GridIndex::new(r, c, cols)
}
