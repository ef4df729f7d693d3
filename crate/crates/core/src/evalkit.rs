//! Keypoint and instance precision/recall.
//!
//! A predicted keypoint is a true positive when it is matched one-to-one to a
//! same-identity ground-truth point closer than 5% of the image width.
//! Predicted instances are true positives when their TP-keypoint count lies
//! in `[min_keypoints, n_kp]` and they claim a ground-truth instance no other
//! prediction has claimed.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionSet;
use crate::error::{Error, Result};

/// Match radius as a fraction of the image width.
pub const TP_DISTANCE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtKeypoint {
    pub id: u32,
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub id: u32,
    pub keypoints: Vec<GtKeypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<GtInstance>,
}

impl GroundTruth {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidAnnotation(format!(
                "{}: zero image size",
                self.image
            )));
        }
        for inst in &self.instances {
            let mut seen = HashSet::new();
            for kp in &inst.keypoints {
                if kp.id == 0 || !seen.insert(kp.id) {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: instance {} has invalid or repeated keypoint id {}",
                        self.image, inst.id, kp.id
                    )));
                }
                if !(kp.u.is_finite() && kp.v.is_finite()) {
                    return Err(Error::InvalidAnnotation(format!(
                        "{}: non-finite keypoint",
                        self.image
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gt: GroundTruth = serde_json::from_str(text)?;
        gt.validate()?;
        Ok(gt)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn keypoint_count(&self) -> usize {
        self.instances.iter().map(|i| i.keypoints.len()).sum()
    }

    pub fn max_identity(&self) -> u32 {
        self.instances
            .iter()
            .flat_map(|i| i.keypoints.iter().map(|k| k.id))
            .max()
            .unwrap_or(0)
    }
}

/// Ground-truth keypoint a prediction was matched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GtRef {
    pub instance: usize,
    pub keypoint: usize,
}

/// Per predicted keypoint (indexed `[instance][keypoint]`), its matched GT
/// point if it is a true positive.
pub type KeypointMatches = Vec<Vec<Option<GtRef>>>;

pub fn match_keypoints(pred: &DetectionSet, gt: &GroundTruth) -> Result<KeypointMatches> {
    if let (Some(w), Some(h)) = (pred.width, pred.height) {
        if (w, h) != (gt.width, gt.height) {
            return Err(Error::FrameMismatch(format!(
                "{}: predictions in a {w}x{h} frame, ground truth is {}x{}",
                gt.image, gt.width, gt.height
            )));
        }
    }
    let limit = TP_DISTANCE_FRACTION * gt.width as f64;
    let mut pairs = Vec::new();
    for (pi, inst) in pred.instances.iter().enumerate() {
        for (pk, p) in inst.keypoints.iter().enumerate() {
            for (gi, ginst) in gt.instances.iter().enumerate() {
                for (gk, g) in ginst.keypoints.iter().enumerate() {
                    if p.id != g.id {
                        continue;
                    }
                    let dist = (p.u - g.u).hypot(p.v - g.v);
                    if dist < limit {
                        pairs.push((dist, (pi, pk), (gi, gk)));
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut out: KeypointMatches = pred
        .instances
        .iter()
        .map(|i| vec![None; i.keypoints.len()])
        .collect();
    let mut gt_used = HashSet::new();
    for (_, (pi, pk), (gi, gk)) in pairs {
        if out[pi][pk].is_none() && !gt_used.contains(&(gi, gk)) {
            out[pi][pk] = Some(GtRef {
                instance: gi,
                keypoint: gk,
            });
            gt_used.insert((gi, gk));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r_kp: f64,
    pub p_kp: f64,
    pub r_ins: f64,
    pub p_ins: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub tp_kp: usize,
    pub fp_kp: usize,
    pub fn_kp: usize,
    pub tp_ins: usize,
    pub fp_ins: usize,
    pub fn_ins: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score_image(
    pred: &DetectionSet,
    gt: &GroundTruth,
    min_keypoints: usize,
    n_kp: usize,
) -> Result<EvalResult> {
    let matches = match_keypoints(pred, gt)?;
    let n_pred = pred.keypoint_count();
    let n_gt = gt.keypoint_count();
    let tp_kp = matches.iter().flatten().filter(|m| m.is_some()).count();

    // (tp count, instance order, plurality GT instance) for eligible predictions
    let mut eligible: Vec<(usize, usize, usize)> = Vec::new();
    for (pi, inst) in matches.iter().enumerate() {
        let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
        for m in inst.iter().flatten() {
            *votes.entry(m.instance).or_default() += 1;
        }
        let t: usize = votes.values().sum();
        if t < min_keypoints || t > n_kp || t == 0 {
            continue;
        }
        let plurality = votes
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(&g, _)| g)
            .unwrap();
        eligible.push((t, pi, plurality));
    }
    eligible.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut claimed = HashSet::new();
    let mut tp_ins = 0;
    for (_, _, g) in eligible {
        if claimed.insert(g) {
            tp_ins += 1;
        }
    }
    let n_pred_ins = pred.instances.len();
    let n_gt_ins = gt.instances.len();
    Ok(EvalResult {
        metrics: Metrics {
            r_kp: ratio(tp_kp, n_gt),
            p_kp: ratio(tp_kp, n_pred),
            r_ins: ratio(claimed.len(), n_gt_ins),
            p_ins: ratio(tp_ins, n_pred_ins),
        },
        tp_kp,
        fp_kp: n_pred - tp_kp,
        fn_kp: n_gt - tp_kp,
        tp_ins,
        fp_ins: n_pred_ins - tp_ins,
        fn_ins: n_gt_ins - claimed.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub name: String,
    pub images: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub sequences: Vec<SequenceSummary>,
    pub mean: Metrics,
}

fn mean_metrics<'a>(items: impl Iterator<Item = &'a Metrics>) -> Option<Metrics> {
    let mut n = 0usize;
    let mut acc = [0f64; 4];
    for m in items {
        n += 1;
        for (a, v) in acc.iter_mut().zip([m.r_kp, m.p_kp, m.r_ins, m.p_ins]) {
            *a += v;
        }
    }
    (n > 0).then(|| Metrics {
        r_kp: acc[0] / n as f64,
        p_kp: acc[1] / n as f64,
        r_ins: acc[2] / n as f64,
        p_ins: acc[3] / n as f64,
    })
}

/// Unweighted per-sequence means over images, then over sequences.
pub fn aggregate(groups: &[(String, Vec<EvalResult>)]) -> Result<Summary> {
    if groups.is_empty() {
        return Err(Error::EmptyGroup("no sequences to aggregate".into()));
    }
    let sequences = groups
        .iter()
        .map(|(name, results)| {
            let metrics = mean_metrics(results.iter().map(|r| &r.metrics))
                .ok_or_else(|| Error::EmptyGroup(format!("sequence {name} has no images")))?;
            Ok(SequenceSummary {
                name: name.clone(),
                images: results.len(),
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_metrics(sequences.iter().map(|s| &s.metrics)).unwrap();
    Ok(Summary { sequences, mean })
}

/// Aligned text table with one row per sequence and a final mean row.
pub fn render_table(summary: &Summary) -> String {
    let name_w = summary
        .sequences
        .iter()
        .map(|s| s.name.chars().count())
        .chain([8])
        .max()
        .unwrap();
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}  {:>6}", "Sequence", "Images");
    for col in ["R\u{304}_KP", "P\u{304}_KP", "R\u{304}_INS", "P\u{304}_INS"] {
        // combining overbars take no column
        let width = col
            .chars()
            .filter(|c| !('\u{300}'..='\u{36f}').contains(c))
            .count();
        let _ = write!(out, "  {}{col}", " ".repeat(6 - width));
    }
    out.push('\n');
    let row = |out: &mut String, name: &str, images: String, m: &Metrics| {
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>6}  {:>6.3}  {:>6.3}  {:>6.3}  {:>6.3}",
            name, images, m.r_kp, m.p_kp, m.r_ins, m.p_ins
        );
    };
    for s in &summary.sequences {
        row(&mut out, &s.name, s.images.to_string(), &s.metrics);
    }
    let total: usize = summary.sequences.iter().map(|s| s.images).sum();
    row(&mut out, "Mean", total.to_string(), &summary.mean);
    out
}
