#![allow(clippy::needless_range_loop)]

mod common;
mod oracles;

use okp_core::enhance::enhance_binned;
use okp_core::matching::{
    best_prototypes, candidates_from_bpp, nms, similarity_matrix, similarity_matrix_binned,
};
use okp_core::prototype::{learn_prototypes, AnnotatedKeypoint, Annotation, PrototypeConfig};
use okp_core::{CandidateKeypoint, EnhanceConfig, GridIndex, MatchConfig};
use proptest::prelude::*;

fn rows_of(s: &okp_core::SimilarityMatrix) -> Vec<Vec<f32>> {
    s.data().chunks(s.cols()).map(|r| r.to_vec()).collect()
}

fn candidate() -> impl Strategy<Value = CandidateKeypoint> {
    (0usize..100, -1.0f32..1.0, any::<bool>(), 0u8..4).prop_map(|(flat, score, adj, q)| {
        CandidateKeypoint {
            identity: 1,
            cell: GridIndex::from_flat(flat, 10),
            // quantized scores exercise ties
            score: if q == 0 {
                (score * 4.0).round() / 4.0
            } else {
                score
            },
            via_adjacent: adj,
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn base_similarity_matches_double_loop(
        s in common::feature_map(1usize..9, 1usize..9, 1usize..17),
        seed in any::<u64>(), qr in 1usize..9, qc in 1usize..9,
    ) {
        let q = oracles::seeded_map(qr, qc, s.channels(), seed);
        let got = similarity_matrix(&s, &q).unwrap();
        let want = oracles::naive_similarity(&s, &q);
        for i in 0..s.cells() {
            for j in 0..q.cells() {
                prop_assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-4);
            }
        }
        prop_assert_eq!(best_prototypes(&got), oracles::naive_argmax(&rows_of(&got)));
    }

    #[test]
    fn binned_similarity_matches_materialized_oracle(
        s in common::feature_map(1usize..8, 1usize..8, 1usize..5),
        seed in any::<u64>(), qr in 1usize..8, qc in 1usize..8,
    ) {
        let cfg = EnhanceConfig::default();
        let q = oracles::seeded_map(qr, qc, s.channels(), seed);
        let (sb, qb) = (enhance_binned(&s, &cfg).unwrap(), enhance_binned(&q, &cfg).unwrap());
        let got = similarity_matrix_binned(&sb, &qb).unwrap();
        let want = oracles::naive_similarity(&sb.materialize(), &qb.materialize());
        for i in 0..s.cells() {
            for j in 0..q.cells() {
                prop_assert!((got.get(i, j) as f64 - want[i][j]).abs() < 1e-4);
            }
        }
        prop_assert_eq!(best_prototypes(&got), oracles::naive_argmax(&rows_of(&got)));
    }

    #[test]
    fn similarity_is_bounded_and_self_exact(s in common::feature_map(1usize..7, 1usize..7, 1usize..9)) {
        let sim = similarity_matrix(&s, &s).unwrap();
        prop_assert!(sim.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for i in 0..s.cells() {
            if s.cell(i).iter().any(|v| *v != 0.0) {
                prop_assert_eq!(sim.get(i, i), 1.0);
            }
        }
    }

    #[test]
    fn candidates_match_brute_force_membership(
        seed in any::<u64>(), n_kp in 2usize..5, thr in -0.5f32..0.5,
    ) {
        let (rows, cols, d) = (8, 8, 3);
        let support = oracles::seeded_map(rows, cols, d, seed);
        let query = oracles::seeded_map(rows, cols, d, seed ^ 0xABCD);
        let keypoints = (0..n_kp)
            .map(|k| AnnotatedKeypoint { id: k as u32 + 1, u: (2 * k + 1) as f64, v: (k + 2) as f64 })
            .collect();
        let ann = Annotation { keypoints, excluded_edges: vec![] };
        let store = learn_prototypes(support, ann, PrototypeConfig::default()).unwrap();
        let qb = enhance_binned(&query, &store.config().enhance).unwrap();
        let s = similarity_matrix_binned(store.support_binned(), &qb).unwrap();
        let bpp = best_prototypes(&s);
        let cfg = MatchConfig { cand_threshold: thr, nms_radius: 0 };
        let got = candidates_from_bpp(&store, &s, &bpp, cols, &cfg);

        let mut want = Vec::new();
        for kp in store.keypoints() {
            for j in 0..rows * cols {
                let i = bpp[j];
                let score = s.get(i, j);
                let direct = i == kp.cell.flat;
                let r = (kp.cell.row as isize - (i / cols) as isize).abs();
                let c = (kp.cell.col as isize - (i % cols) as isize).abs();
                if score > thr && (direct || r + c == 1) {
                    want.push((kp.id, j, direct));
                }
            }
        }
        let mut got_set: Vec<_> = got.iter().map(|c| (c.identity, c.cell.flat, !c.via_adjacent)).collect();
        got_set.sort();
        want.sort();
        prop_assert_eq!(got_set, want);
    }

    #[test]
    fn nms_invariants(cands in prop::collection::vec(candidate(), 0..40), radius in 0usize..4) {
        let kept = nms(&cands, radius);
        for (a, x) in kept.iter().enumerate() {
            for y in &kept[a + 1..] {
                prop_assert!(x.cell.chebyshev(&y.cell) > radius);
            }
        }
        for c in &cands {
            let covered = kept.iter().any(|k| k.cell.chebyshev(&c.cell) <= radius && k.score >= c.score);
            prop_assert!(covered);
        }
        prop_assert_eq!(nms(&kept, radius), kept.clone());
        let mut reversed = cands.clone();
        reversed.reverse();
        prop_assert_eq!(nms(&reversed, radius), kept);
    }
}
