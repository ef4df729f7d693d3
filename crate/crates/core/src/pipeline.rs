//! End-to-end query extraction: enhance, match, group, map to raw pixels.

use serde::{Deserialize, Serialize};

use crate::detection::{DetectedInstance, DetectedKeypoint, DetectionSet};
use crate::enhance::enhance_binned;
use crate::error::{Error, Result};
use crate::feature_io::{grid_to_pixel, scale_to_raw, FeatureMap, GridGeometry, GridIndex};
use crate::group::{group_candidates, GroupConfig, Instance};
use crate::matching::{extract_candidates, CandidateKeypoint, MatchConfig};
use crate::prototype::PrototypeStore;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtractConfig {
    pub matching: MatchConfig,
    pub grouping: GroupConfig,
}

/// Intermediate and final results of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub candidates: Vec<CandidateKeypoint>,
    pub instances: Vec<Instance>,
}

/// Rejects queries whose descriptors cannot be compared with the store's.
pub fn check_compatible(store: &PrototypeStore, query: &FeatureMap) -> Result<()> {
    if store.base_channels() != query.channels() {
        return Err(Error::ChannelMismatch {
            left: store.base_channels(),
            right: query.channels(),
        });
    }
    let (s, q) = (store.support().geometry(), query.geometry());
    if (s.patch, s.stride) != (q.patch, q.stride) {
        return Err(Error::GeometryMismatch(format!(
            "support patch/stride {}/{} vs query {}/{}",
            s.patch, s.stride, q.patch, q.stride
        )));
    }
    Ok(())
}

pub fn run(store: &PrototypeStore, query: &FeatureMap, cfg: &ExtractConfig) -> Result<Extraction> {
    check_compatible(store, query)?;
    let binned = enhance_binned(query, &store.config().enhance)?;
    let candidates = extract_candidates(store, &binned, &cfg.matching)?;
    let instances = group_candidates(&candidates, store, &binned, &cfg.grouping)?;
    Ok(Extraction {
        candidates,
        instances,
    })
}

/// Raw-image pixel position of a grid cell; without raw geometry the model
/// input frame is used as is.
pub fn cell_to_raw(cell: GridIndex, geom: &GridGeometry) -> (f64, f64) {
    let (u, v) = grid_to_pixel(cell, geom);
    match scale_to_raw(u, v, geom) {
        Ok(p) => p,
        Err(_) => (u, v),
    }
}

/// Frame size detections are reported in.
pub fn output_frame(geom: &GridGeometry) -> (u32, u32) {
    match geom.raw {
        Some(raw) => (raw.width, raw.height),
        None => (geom.src_w, geom.src_h),
    }
}

pub fn to_detections(instances: &[Instance], geom: &GridGeometry, image: &str) -> DetectionSet {
    let (w, h) = output_frame(geom);
    DetectionSet {
        image: image.to_string(),
        width: Some(w),
        height: Some(h),
        instances: instances
            .iter()
            .enumerate()
            .map(|(n, inst)| DetectedInstance {
                n,
                cohesion: inst.cohesion,
                keypoints: inst
                    .keypoints
                    .iter()
                    .map(|(&id, kp)| {
                        let (u, v) = cell_to_raw(kp.cell, geom);
                        DetectedKeypoint {
                            id,
                            u,
                            v,
                            score: kp.score,
                        }
                    })
                    .collect(),
            })
            .collect(),
    }
}

pub fn extract(
    store: &PrototypeStore,
    query: &FeatureMap,
    cfg: &ExtractConfig,
    image: &str,
) -> Result<DetectionSet> {
    let result = run(store, query, cfg)?;
    Ok(to_detections(&result.instances, query.geometry(), image))
}
