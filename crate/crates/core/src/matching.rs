//! Best-prototype matching: dense support×query cosine similarity, per-query
//! argmax over all support cells, and per-identity candidate gathering with
//! non-maximum suppression.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhance::{block_source, BinnedMap, BlockSource, BLOCKS};
use crate::error::{Error, Result};
use crate::feature_io::{CellFeatures, FeatureMap, GridIndex};
use crate::kernel;
use crate::prototype::PrototypeStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Candidates scoring at or below this are dropped.
    pub cand_threshold: f32,
    /// Chebyshev radius, in cells, of per-identity suppression.
    pub nms_radius: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            cand_threshold: 0.0,
            nms_radius: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateKeypoint {
    pub identity: u32,
    pub cell: GridIndex,
    pub score: f32,
    /// Matched one of the keypoint's adjacent support cells rather than the
    /// keypoint cell itself.
    pub via_adjacent: bool,
}

/// Cosine from a raw inner product and both squared norms. Zero norms map to
/// -1 so degenerate descriptors never win an argmax.
#[inline]
fn cosine_from_parts(dot: f64, norm2_a: f64, norm2_b: f64) -> f32 {
    if norm2_a == 0.0 || norm2_b == 0.0 {
        return -1.0;
    }
    (dot / (norm2_a * norm2_b).sqrt()).clamp(-1.0, 1.0) as f32
}

pub fn cosine_similarity(x: &[f32], y: &[f32]) -> Result<f32> {
    if x.len() != y.len() {
        return Err(Error::ChannelMismatch {
            left: x.len(),
            right: y.len(),
        });
    }
    let (nx, ny) = (kernel::dot(x, x) as f64, kernel::dot(y, y) as f64);
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(cosine_from_parts(kernel::dot(x, y) as f64, nx, ny))
}

/// Cosine similarity with the degenerate case folded to -1.
pub fn cosine_or_min(x: &[f32], y: &[f32]) -> f32 {
    match cosine_similarity(x, y) {
        Ok(v) => v,
        Err(Error::ZeroVector) => -1.0,
        Err(e) => panic!("{e}"),
    }
}

/// Row-major `support cells × query cells` cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        SimilarityMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, support: usize, query: usize) -> f32 {
        self.data[support * self.cols + query]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Similarity between two materialized maps via a blocked Gram kernel.
pub fn similarity_matrix(support: &FeatureMap, query: &FeatureMap) -> Result<SimilarityMatrix> {
    if support.channels() != query.channels() {
        return Err(Error::ChannelMismatch {
            left: support.channels(),
            right: query.channels(),
        });
    }
    let d = support.channels();
    let ns = kernel::squared_norms(support.data(), d);
    let nq = kernel::squared_norms(query.data(), d);
    let mut data = kernel::gram(support.data(), query.data(), d);
    let cols = query.cells();
    data.par_chunks_mut(cols)
        .zip(ns.par_iter())
        .for_each(|(row, &n_i)| {
            for (v, &n_j) in row.iter_mut().zip(&nq) {
                *v = cosine_from_parts(*v as f64, n_i as f64, n_j as f64);
            }
        });
    Ok(SimilarityMatrix {
        rows: support.cells(),
        cols,
        data,
    })
}

/// Similarity between two binned maps without materializing `17 × D`
/// channels: inner products of the attended and pooled base maps are
/// computed once and each binned dot product is the block-wise sum of
/// gathered base products.
pub fn similarity_matrix_binned(
    support: &BinnedMap,
    query: &BinnedMap,
) -> Result<SimilarityMatrix> {
    let d = support.base_channels();
    if d != query.base_channels() {
        return Err(Error::ChannelMismatch {
            left: support.channels(),
            right: query.channels(),
        });
    }
    if support.spacing() != query.spacing() {
        return Err(Error::InvalidConfig(format!(
            "bin spacing differs: {} vs {}",
            support.spacing(),
            query.spacing()
        )));
    }
    let g_att = kernel::gram(support.attended().data(), query.attended().data(), d);
    let g_pool = kernel::gram(support.pooled().data(), query.pooled().data(), d);
    let s_tab: Vec<Vec<usize>> = (0..BLOCKS).map(|b| support.block_table(b)).collect();
    let q_tab: Vec<Vec<usize>> = (0..BLOCKS).map(|b| query.block_table(b)).collect();
    let ns = support.squared_norms();
    let nq = query.squared_norms();

    let (rows, cols) = (support.rows() * support.cols(), query.rows() * query.cols());
    let mut data = vec![0f32; rows * cols];
    data.par_chunks_mut(cols).enumerate().for_each(|(i, out)| {
        let mut acc = vec![0f64; cols];
        for b in 0..BLOCKS {
            let g = match block_source(b) {
                BlockSource::Attended => &g_att,
                BlockSource::Pooled => &g_pool,
            };
            let src = s_tab[b][i];
            let g_row = &g[src * cols..(src + 1) * cols];
            for (a, &j_src) in acc.iter_mut().zip(&q_tab[b]) {
                *a += g_row[j_src] as f64;
            }
        }
        for ((o, a), &n_j) in out.iter_mut().zip(&acc).zip(&nq) {
            *o = cosine_from_parts(*a, ns[i], n_j);
        }
    });
    Ok(SimilarityMatrix { rows, cols, data })
}

/// Index of the best support cell for every query cell; ties go to the
/// smallest support index.
pub fn best_prototypes(s: &SimilarityMatrix) -> Vec<usize> {
    let mut best = vec![0usize; s.cols];
    let mut best_v = s.data[..s.cols].to_vec();
    for i in 1..s.rows {
        let row = &s.data[i * s.cols..(i + 1) * s.cols];
        for ((b, bv), &v) in best.iter_mut().zip(best_v.iter_mut()).zip(row) {
            if v > *bv {
                *bv = v;
                *b = i;
            }
        }
    }
    best
}

/// Gathers candidates from precomputed best prototypes: a query cell is a
/// candidate for identity `k` when its best support cell is keypoint `k`'s
/// cell or one of its adjacent cells. Output is grouped by identity
/// (ascending), each group in NMS keep order.
pub fn candidates_from_bpp(
    store: &PrototypeStore,
    s: &SimilarityMatrix,
    bpp: &[usize],
    query_cols: usize,
    cfg: &MatchConfig,
) -> Vec<CandidateKeypoint> {
    let mut owners: Vec<Vec<(u32, bool)>> = vec![Vec::new(); s.rows];
    for kp in store.keypoints() {
        owners[kp.cell.flat].push((kp.id, false));
        for adj in &kp.adjacent_cells {
            owners[adj.flat].push((kp.id, true));
        }
    }
    let mut per_identity: Vec<Vec<CandidateKeypoint>> = vec![Vec::new(); store.n_kp()];
    for (j, &i) in bpp.iter().enumerate() {
        let score = s.get(i, j);
        if score <= cfg.cand_threshold {
            continue;
        }
        for &(identity, via_adjacent) in &owners[i] {
            per_identity[identity as usize - 1].push(CandidateKeypoint {
                identity,
                cell: GridIndex::from_flat(j, query_cols),
                score,
                via_adjacent,
            });
        }
    }
    per_identity
        .into_iter()
        .flat_map(|group| nms(&group, cfg.nms_radius))
        .collect()
}

pub fn extract_candidates(
    store: &PrototypeStore,
    query: &BinnedMap,
    cfg: &MatchConfig,
) -> Result<Vec<CandidateKeypoint>> {
    if store.binned_channels() != query.channels() {
        return Err(Error::ChannelMismatch {
            left: store.binned_channels(),
            right: query.channels(),
        });
    }
    let s = similarity_matrix_binned(store.support_binned(), query)?;
    let bpp = best_prototypes(&s);
    Ok(candidates_from_bpp(store, &s, &bpp, query.cols(), cfg))
}

/// Greedy suppression within one identity: highest score first (ties prefer
/// direct keypoint matches, then the smaller flat index); a candidate is
/// dropped when it lies within `radius` (Chebyshev) of one already kept.
pub fn nms(cands: &[CandidateKeypoint], radius: usize) -> Vec<CandidateKeypoint> {
    let mut order: Vec<&CandidateKeypoint> = cands.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.via_adjacent.cmp(&b.via_adjacent))
            .then(a.cell.flat.cmp(&b.cell.flat))
    });
    let mut kept: Vec<CandidateKeypoint> = Vec::new();
    for c in order {
        if kept.iter().all(|k| k.cell.chebyshev(&c.cell) > radius) {
            kept.push(*c);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(identity: u32, row: usize, col: usize, score: f32) -> CandidateKeypoint {
        CandidateKeypoint {
            identity,
            cell: GridIndex::new(row, col, 16),
            score,
            via_adjacent: false,
        }
    }

    #[test]
    fn cosine_basics() {
        let z = [0.3f32, -1.2, 2.0];
        assert!((cosine_similarity(&z, &z).unwrap() - 1.0).abs() < 1e-6);
        let neg: Vec<f32> = z.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&z, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroVector)
        ));
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 0.0]),
            Err(Error::ChannelMismatch { .. })
        ));
        assert_eq!(cosine_or_min(&[0.0, 0.0], &[1.0, 0.0]), -1.0);
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let z = [0.3f32, -1.2, 2.0, 0.7, 1e-3, 5.5, -0.25, 3.0, 1.0];
        assert_eq!(cosine_similarity(&z, &z).unwrap(), 1.0);
    }

    #[test]
    fn best_prototype_argmax_and_ties() {
        let s = SimilarityMatrix::from_vec(3, 1, vec![0.2, 0.9, 0.1]);
        assert_eq!(best_prototypes(&s), vec![1]);
        let s = SimilarityMatrix::from_vec(2, 1, vec![0.5, 0.5]);
        assert_eq!(best_prototypes(&s), vec![0]);
    }

    #[test]
    fn copied_cell_wins_the_column() {
        // 4 mutually non-parallel support cells, query copies cell 3
        let support = FeatureMap::from_grid(
            2,
            2,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.5, -0.3, 0.8],
        )
        .unwrap();
        let query = FeatureMap::from_grid(1, 1, 3, vec![0.5, -0.3, 0.8]).unwrap();
        let s = similarity_matrix(&support, &query).unwrap();
        assert_eq!(best_prototypes(&s), vec![3]);
        assert_eq!(s.get(3, 0), 1.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let a = FeatureMap::from_grid(1, 1, 3, vec![1.0; 3]).unwrap();
        let b = FeatureMap::from_grid(1, 1, 2, vec![1.0; 2]).unwrap();
        assert!(matches!(
            similarity_matrix(&a, &b),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn zero_cells_never_win() {
        let support = FeatureMap::from_grid(1, 2, 2, vec![0.0, 0.0, -1.0, 0.1]).unwrap();
        let query = FeatureMap::from_grid(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let s = similarity_matrix(&support, &query).unwrap();
        assert_eq!(s.get(0, 0), -1.0);
        assert_eq!(best_prototypes(&s), vec![1]);
    }

    #[test]
    fn nms_examples() {
        let close = [cand(1, 4, 4, 0.8), cand(1, 4, 5, 0.9)];
        assert_eq!(nms(&close, 2), vec![close[1]]);
        let far = [cand(1, 4, 4, 0.8), cand(1, 4, 9, 0.9)];
        assert_eq!(nms(&far, 2), vec![far[1], far[0]]);
        assert_eq!(nms(&close, 0).len(), 2);
    }

    #[test]
    fn nms_prefers_direct_matches_on_equal_scores() {
        let mut adj = cand(2, 3, 3, 1.0);
        adj.via_adjacent = true;
        let direct = cand(2, 4, 3, 1.0);
        assert_eq!(nms(&[adj, direct], 2), vec![direct]);
        let plain = cand(2, 5, 3, 1.0);
        assert_eq!(nms(&[plain, direct], 2), vec![direct]);
    }
}
