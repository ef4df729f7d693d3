mod common;
mod oracles;

use okp_core::enhance::{average_pool_3x3, enhance, enhance_binned, objectness_activation, BLOCKS};
use okp_core::{CellFeatures, EnhanceConfig};
use proptest::prelude::*;

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn binned_cells_match_gather_oracle(map in common::feature_map(1usize..13, 1usize..13, 1usize..9)) {
        let cfg = EnhanceConfig::default();
        let binned = enhance(&map, &cfg).unwrap();
        prop_assert_eq!(binned.channels(), BLOCKS * map.channels());
        for r in 0..map.rows() {
            for c in 0..map.cols() {
                let want = oracles::naive_binned_cell(&map, cfg.alpha, r, c);
                prop_assert_eq!(bits(binned.at(r, c)), bits(&want), "cell ({}, {})", r, c);
            }
        }
    }

    #[test]
    fn implicit_and_materialized_agree(map in common::feature_map(1usize..9, 1usize..9, 1usize..6)) {
        let cfg = EnhanceConfig::default();
        let implicit = enhance_binned(&map, &cfg).unwrap();
        let dense = implicit.materialize();
        let mut buf = vec![0f32; implicit.channels()];
        for flat in 0..map.cells() {
            implicit.gather_cell(flat, &mut buf);
            prop_assert_eq!(bits(&buf), bits(dense.cell(flat)));
        }
    }

    #[test]
    fn activation_is_normalized(map in common::feature_map(1usize..10, 1usize..10, 1usize..6)) {
        let act = objectness_activation(&map);
        let lo = act.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = act.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(lo >= -1.0 && hi <= 1.0);
        if act.values.len() > 1 && hi > lo {
            prop_assert_eq!(lo, -1.0);
            prop_assert_eq!(hi, 1.0);
        }
    }

    #[test]
    fn pooling_matches_oracle_and_bounds(map in common::feature_map(1usize..10, 1usize..10, 1usize..5)) {
        let pooled = average_pool_3x3(&map);
        let want = oracles::naive_pool(map.data(), map.rows(), map.cols(), map.channels());
        prop_assert_eq!(bits(pooled.data()), bits(&want));
        let lo = map.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = map.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(pooled.data().iter().all(|v| *v >= lo && *v <= hi));
    }

    #[test]
    fn positive_rescaling_keeps_activation(
        map in common::feature_map(1usize..8, 1usize..8, 1usize..5), k in 0.25f32..4.0,
    ) {
        // activation only depends on relative objectness
        let scaled: Vec<f32> = map.data().iter().map(|v| v * k).collect();
        let other = okp_core::FeatureMap::from_grid(map.rows(), map.cols(), map.channels(), scaled).unwrap();
        let a = objectness_activation(&map);
        let b = objectness_activation(&other);
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-4);
        }
    }
}

#[test]
fn disabling_attention_bins_the_raw_map() {
    let map = oracles::seeded_map(7, 9, 3, 11);
    let cfg = EnhanceConfig {
        use_objectness_attention: false,
        ..EnhanceConfig::default()
    };
    let binned = enhance_binned(&map, &cfg).unwrap();
    assert_eq!(bits(binned.attended().data()), bits(map.data()));
}
