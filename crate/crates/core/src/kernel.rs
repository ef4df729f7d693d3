//! Blocked f32 inner-product kernels.
//!
//! Every dot product, whether computed alone or inside a register-blocked
//! Gram tile, uses the same lane layout and reduction tree, so the result for
//! a given pair of vectors is bit-identical on every path and independent of
//! the number of worker threads.

use rayon::prelude::*;

const LANES: usize = 8;
const ROW_BLOCK: usize = 4;
const COL_TILE: usize = 96;
const TASK_ROWS: usize = 16;

#[inline(always)]
fn reduce(acc: &[f32; LANES]) -> f32 {
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

/// `R` simultaneous dot products of `rows[r]` against `b`.
#[inline(always)]
fn dot_rows<const R: usize>(rows: [&[f32]; R], b: &[f32]) -> [f32; R] {
    let d = b.len();
    let full = d - d % LANES;
    let mut acc = [[0f32; LANES]; R];
    let mut k = 0;
    while k < full {
        let bv = &b[k..k + LANES];
        for r in 0..R {
            let av = &rows[r][k..k + LANES];
            for l in 0..LANES {
                acc[r][l] += av[l] * bv[l];
            }
        }
        k += LANES;
    }
    let mut out = [0f32; R];
    for r in 0..R {
        let mut tail = 0f32;
        for k in full..d {
            tail += rows[r][k] * b[k];
        }
        out[r] = reduce(&acc[r]) + tail;
    }
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot of unequal lengths");
    dot_rows::<1>([a], b)[0]
}

/// Squared L2 norm of every `d`-wide row of `a`.
pub fn squared_norms(a: &[f32], d: usize) -> Vec<f32> {
    a.par_chunks(d).map(|row| dot(row, row)).collect()
}

/// Row-major `m × n` matrix of inner products between the `d`-wide rows of
/// `a` (m rows) and `b` (n rows).
pub fn gram(a: &[f32], b: &[f32], d: usize) -> Vec<f32> {
    assert!(d > 0 && a.len().is_multiple_of(d) && b.len().is_multiple_of(d));
    let m = a.len() / d;
    let n = b.len() / d;
    let mut out = vec![0f32; m * n];
    if n == 0 {
        return out;
    }
    out.par_chunks_mut(TASK_ROWS * n)
        .enumerate()
        .for_each(|(task, block)| {
            let i0 = task * TASK_ROWS;
            let rows_here = block.len() / n;
            gram_block(&a[i0 * d..(i0 + rows_here) * d], b, d, block);
        });
    out
}

fn gram_block(a: &[f32], b: &[f32], d: usize, out: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the required CPU feature was detected at runtime.
        return unsafe { gram_block_avx2(a, b, d, out) };
    }
    gram_block_generic(a, b, d, out)
}

/// Same lane-wise mul/add sequence as the generic path (no fused
/// multiply-add), so the results are bit-identical; only the vector width
/// changes.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gram_block_avx2(a: &[f32], b: &[f32], d: usize, out: &mut [f32]) {
    gram_block_generic(a, b, d, out)
}

#[inline(always)]
fn gram_block_generic(a: &[f32], b: &[f32], d: usize, out: &mut [f32]) {
    let m = a.len() / d;
    let n = b.len() / d;
    let row = |i: usize| &a[i * d..(i + 1) * d];
    for j0 in (0..n).step_by(COL_TILE) {
        let j1 = (j0 + COL_TILE).min(n);
        let mut i = 0;
        while i + ROW_BLOCK <= m {
            let rows = [row(i), row(i + 1), row(i + 2), row(i + 3)];
            for j in j0..j1 {
                let v = dot_rows::<ROW_BLOCK>(rows, &b[j * d..(j + 1) * d]);
                for r in 0..ROW_BLOCK {
                    out[(i + r) * n + j] = v[r];
                }
            }
            i += ROW_BLOCK;
        }
        for i in i..m {
            for j in j0..j1 {
                out[i * n + j] = dot(row(i), &b[j * d..(j + 1) * d]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(n: usize, seed: u32) -> Vec<f32> {
        let mut s = seed.wrapping_mul(2654435761).wrapping_add(1);
        (0..n)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s % 2001) as f32 / 1000.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn dot_matches_f64_reference() {
        for d in [1, 7, 8, 9, 31, 64, 100] {
            let a = pseudo(d, 1);
            let b = pseudo(d, 2);
            let reference: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
            assert!((dot(&a, &b) as f64 - reference).abs() < 1e-4, "d = {d}");
        }
    }

    #[test]
    fn gram_entries_are_bit_identical_to_single_dots() {
        for (m, n, d) in [(1, 1, 3), (5, 7, 9), (17, 130, 16), (33, 3, 40)] {
            let a = pseudo(m * d, 3);
            let b = pseudo(n * d, 4);
            let g = gram(&a, &b, d);
            for i in 0..m {
                for j in 0..n {
                    let single = dot(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]);
                    assert_eq!(g[i * n + j].to_bits(), single.to_bits());
                }
            }
        }
    }

    #[test]
    fn self_gram_diagonal_equals_squared_norms() {
        let d = 13;
        let a = pseudo(10 * d, 5);
        let g = gram(&a, &a, d);
        let norms = squared_norms(&a, d);
        for i in 0..10 {
            assert_eq!(g[i * 10 + i].to_bits(), norms[i].to_bits());
        }
    }
}
