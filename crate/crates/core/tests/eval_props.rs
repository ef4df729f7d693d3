#![allow(clippy::needless_range_loop)]

use okp_core::detection::{DetectedInstance, DetectedKeypoint, DetectionSet};
use okp_core::evalkit::{match_keypoints, score_image, GroundTruth, GtInstance, GtKeypoint};
use proptest::prelude::*;

const WIDTH: u32 = 200;

fn points(max: usize) -> impl Strategy<Value = Vec<(u32, f64, f64)>> {
    prop::collection::vec((1u32..4, 0.0f64..40.0, 0.0f64..40.0), 0..max)
}

fn gt_from(pts: &[(u32, f64, f64)]) -> GroundTruth {
    // one GT keypoint per instance keeps identities unique within instances
    GroundTruth {
        image: "img".into(),
        width: WIDTH,
        height: WIDTH,
        instances: pts
            .iter()
            .enumerate()
            .map(|(i, &(id, u, v))| GtInstance {
                id: i as u32,
                keypoints: vec![GtKeypoint { id, u, v }],
            })
            .collect(),
    }
}

fn pred_from(pts: &[(u32, f64, f64)]) -> DetectionSet {
    DetectionSet {
        image: "img".into(),
        width: None,
        height: None,
        instances: pts
            .iter()
            .enumerate()
            .map(|(n, &(id, u, v))| DetectedInstance {
                n,
                cohesion: 1.0,
                keypoints: vec![DetectedKeypoint {
                    id,
                    u,
                    v,
                    score: 1.0,
                }],
            })
            .collect(),
    }
}

/// Largest one-to-one matching among admissible pairs, by exhaustive search.
fn max_matching(adm: &[Vec<usize>], gt_n: usize) -> usize {
    fn go(i: usize, adm: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if i == adm.len() {
            return 0;
        }
        let mut best = go(i + 1, adm, used);
        for &g in &adm[i] {
            if !used[g] {
                used[g] = true;
                best = best.max(1 + go(i + 1, adm, used));
                used[g] = false;
            }
        }
        best
    }
    go(0, adm, &mut vec![false; gt_n])
}

proptest! {
    #[test]
    fn greedy_matching_is_valid_and_maximal(p in points(7), g in points(7)) {
        let (pred, gt) = (pred_from(&p), gt_from(&g));
        let m = match_keypoints(&pred, &gt).unwrap();
        let limit = 0.05 * WIDTH as f64;
        let admissible = |pi: usize, gi: usize| {
            p[pi].0 == g[gi].0 && (p[pi].1 - g[gi].1).hypot(p[pi].2 - g[gi].2) < limit
        };
        let matched: Vec<Option<usize>> = m.iter().map(|inst| inst[0].map(|r| r.instance)).collect();
        let mut used = std::collections::HashSet::new();
        for (pi, mg) in matched.iter().enumerate() {
            if let Some(gi) = mg {
                prop_assert!(admissible(pi, *gi));
                prop_assert!(used.insert(*gi), "GT point matched twice");
            }
        }
        // no admissible pair left with both ends free
        for pi in 0..p.len() {
            for gi in 0..g.len() {
                prop_assert!(!(admissible(pi, gi) && matched[pi].is_none() && !used.contains(&gi)));
            }
        }
        let adm: Vec<Vec<usize>> = (0..p.len()).map(|pi| (0..g.len()).filter(|&gi| admissible(pi, gi)).collect()).collect();
        let best = max_matching(&adm, g.len());
        let tp = used.len();
        prop_assert!(tp <= best && 2 * tp >= best);
    }

    #[test]
    fn metrics_are_ratios_and_scale_invariant(p in points(7), g in points(7)) {
        let r = score_image(&pred_from(&p), &gt_from(&g), 1, 3).unwrap();
        for v in [r.metrics.r_kp, r.metrics.p_kp, r.metrics.r_ins, r.metrics.p_ins] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.tp_kp + r.fn_kp, g.len());
        prop_assert_eq!(r.tp_kp + r.fp_kp, p.len());

        let double = |pts: &[(u32, f64, f64)]| pts.iter().map(|&(i, u, v)| (i, 2.0 * u, 2.0 * v)).collect::<Vec<_>>();
        let mut gt2 = gt_from(&double(&g));
        gt2.width *= 2;
        gt2.height *= 2;
        let r2 = score_image(&pred_from(&double(&p)), &gt2, 1, 3).unwrap();
        prop_assert_eq!(r, r2);
    }

    #[test]
    fn ground_truth_as_prediction_is_perfect(g in points(7)) {
        let r = score_image(&pred_from(&g), &gt_from(&g), 1, 3).unwrap();
        prop_assert_eq!([r.metrics.r_kp, r.metrics.p_kp, r.metrics.r_ins, r.metrics.p_ins], [1.0; 4]);
    }
}

#[test]
fn detection_json_roundtrips_at_f32_precision() {
    let set = DetectionSet {
        image: "x".into(),
        width: Some(640),
        height: Some(480),
        instances: vec![DetectedInstance {
            n: 0,
            cohesion: 0.123_456_79,
            keypoints: vec![DetectedKeypoint {
                id: 2,
                u: 12.345678901,
                v: 0.1,
                score: 0.999_999_9,
            }],
        }],
    };
    let back = DetectionSet::from_json(&serde_json::to_string(&set).unwrap()).unwrap();
    assert_eq!(back, set);
}
