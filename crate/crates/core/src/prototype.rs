//! One-shot prototype learning from an annotated support map, and the OKPP
//! prototype store format.
//!
//! OKPP layout: magic `b"OKPP"`, u8 version `1`, u32-LE length + annotation
//! JSON, u32-LE length + config JSON, then the raw support map as an embedded
//! OKPF stream. Enhanced features and prototypes are recomputed on load.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::enhance::{enhance_binned, BinnedMap, EnhanceConfig};
use crate::error::{Error, Result};
use crate::feature_io::{
    decode_feature_map, pixel_to_grid, write_feature_map, CellFeatures, FeatureMap, GridIndex,
};

pub const OKPP_MAGIC: [u8; 4] = *b"OKPP";
pub const OKPP_VERSION: u8 = 1;
pub const DEFAULT_N_SEG: usize = 8;
/// Samples taken along each sub-segment of an edge.
pub const SAMPLES_PER_SEGMENT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedKeypoint {
    pub id: u32,
    pub u: f64,
    pub v: f64,
}

/// Keypoints in model-input pixels of the support map, plus the keypoint
/// pairs whose connecting edge leaves the object and must not be learned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub keypoints: Vec<AnnotatedKeypoint>,
    #[serde(default)]
    pub excluded_edges: Vec<[u32; 2]>,
}

impl Annotation {
    pub fn from_json(text: &str) -> Result<Self> {
        let ann: Annotation = serde_json::from_str(text)?;
        ann.validate()?;
        Ok(ann)
    }

    pub fn n_kp(&self) -> usize {
        self.keypoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for kp in &self.keypoints {
            if !seen.insert(kp.id) {
                return Err(Error::DuplicateId(kp.id));
            }
            if !(kp.u.is_finite() && kp.v.is_finite()) {
                return Err(Error::InvalidAnnotation(format!(
                    "keypoint {} has non-finite coordinates",
                    kp.id
                )));
            }
        }
        let n = self.keypoints.len();
        if n < 2 {
            return Err(Error::TooFewKeypoints(n));
        }
        if (1..=n as u32).any(|id| !seen.contains(&id)) {
            return Err(Error::InvalidAnnotation(format!(
                "keypoint ids must be contiguous from 1 to {n}"
            )));
        }
        for &[k, l] in &self.excluded_edges {
            if k == l || !seen.contains(&k) || !seen.contains(&l) {
                return Err(Error::InvalidAnnotation(format!(
                    "excluded edge ({k}, {l}) must join two distinct existing ids"
                )));
            }
        }
        Ok(())
    }

    pub fn is_excluded(&self, k: u32, l: u32) -> bool {
        self.excluded_edges
            .iter()
            .any(|&[a, b]| (a, b) == (k, l) || (a, b) == (l, k))
    }

    /// Identity pairs `(k, l)`, `k < l`, that carry an edge prototype.
    pub fn edge_pairs(&self) -> Vec<(u32, u32)> {
        let n = self.n_kp() as u32;
        (1..=n)
            .flat_map(|k| (k + 1..=n).map(move |l| (k, l)))
            .filter(|&(k, l)| !self.is_excluded(k, l))
            .collect()
    }
}

/// Enhancement settings plus the edge segmentation, persisted together.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    #[serde(flatten)]
    pub enhance: EnhanceConfig,
    #[serde(default = "default_n_seg")]
    pub n_seg: usize,
}

fn default_n_seg() -> usize {
    DEFAULT_N_SEG
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            enhance: EnhanceConfig::default(),
            n_seg: DEFAULT_N_SEG,
        }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) -> Result<()> {
        self.enhance.validate()?;
        if self.n_seg == 0 {
            return Err(Error::InvalidConfig("n_seg must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointPrototype {
    pub id: u32,
    pub cell: GridIndex,
    pub vector: Vec<f32>,
    /// 4-neighborhood of `cell`, clamped to the grid, without `cell` itself.
    pub adjacent_cells: Vec<GridIndex>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgePrototype {
    /// `(k, l)` with `k < l`; descriptors run from keypoint `k` to `l`.
    pub ids: (u32, u32),
    pub segments: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    support: FeatureMap,
    annotation: Annotation,
    config: PrototypeConfig,
    support_binned: BinnedMap,
    keypoints: Vec<KeypointPrototype>,
    edges: Vec<EdgePrototype>,
}

impl PrototypeStore {
    pub fn support(&self) -> &FeatureMap {
        &self.support
    }

    pub fn annotation(&self) -> &Annotation {
        &self.annotation
    }

    pub fn config(&self) -> &PrototypeConfig {
        &self.config
    }

    pub fn support_binned(&self) -> &BinnedMap {
        &self.support_binned
    }

    pub fn keypoints(&self) -> &[KeypointPrototype] {
        &self.keypoints
    }

    pub fn edges(&self) -> &[EdgePrototype] {
        &self.edges
    }

    pub fn n_kp(&self) -> usize {
        self.keypoints.len()
    }

    pub fn n_seg(&self) -> usize {
        self.config.n_seg
    }

    /// Channel count of the raw support map.
    pub fn base_channels(&self) -> usize {
        self.support.channels()
    }

    pub fn binned_channels(&self) -> usize {
        self.support_binned.channels()
    }

    pub fn keypoint(&self, id: u32) -> Option<&KeypointPrototype> {
        self.keypoints.iter().find(|kp| kp.id == id)
    }

    /// Edge prototype for an unordered identity pair.
    pub fn edge(&self, k: u32, l: u32) -> Option<&EdgePrototype> {
        let ids = (k.min(l), k.max(l));
        self.edges.iter().find(|e| e.ids == ids)
    }
}

fn adjacent_cells(cell: GridIndex, rows: usize, cols: usize) -> Vec<GridIndex> {
    let mut out = Vec::with_capacity(4);
    for (dr, dc) in [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
        let r = (cell.row as isize + dr).clamp(0, rows as isize - 1) as usize;
        let c = (cell.col as isize + dc).clamp(0, cols as isize - 1) as usize;
        let idx = GridIndex::new(r, c, cols);
        if idx != cell && !out.contains(&idx) {
            out.push(idx);
        }
    }
    out
}

pub fn learn_prototypes(
    support: FeatureMap,
    annotation: Annotation,
    config: PrototypeConfig,
) -> Result<PrototypeStore> {
    annotation.validate()?;
    config.validate()?;
    let geom = *support.geometry();
    let mut cells = Vec::with_capacity(annotation.n_kp());
    let mut sorted = annotation.keypoints.clone();
    sorted.sort_by_key(|kp| kp.id);
    for kp in &sorted {
        cells.push((kp.id, pixel_to_grid(kp.u, kp.v, &geom)?));
    }

    let support_binned = enhance_binned(&support, &config.enhance)?;
    let (rows, cols) = (support.rows(), support.cols());
    let keypoints: Vec<KeypointPrototype> = cells
        .iter()
        .map(|&(id, cell)| KeypointPrototype {
            id,
            cell,
            vector: support_binned.cell_vector(cell.flat),
            adjacent_cells: adjacent_cells(cell, rows, cols),
        })
        .collect();

    let cell_of = |id: u32| keypoints[id as usize - 1].cell;
    let edges = annotation
        .edge_pairs()
        .into_iter()
        .map(|(k, l)| {
            let segments = edge_descriptor(&support_binned, cell_of(k), cell_of(l), config.n_seg)?;
            Ok(EdgePrototype {
                ids: (k, l),
                segments,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PrototypeStore {
        support,
        annotation,
        config,
        support_binned,
        keypoints,
        edges,
    })
}

/// Grid cells sampled for sub-segment `m` of the segment `a → b`.
///
/// Sample `q` sits at parameter `(m + (q + 0.5) / T) / n_seg` and reads the
/// nearest cell. Positions are evaluated as exact rational numbers so a
/// reversed segment visits exactly the same cells.
pub fn segment_sample_cells(
    a: GridIndex,
    b: GridIndex,
    n_seg: usize,
    m: usize,
    cols: usize,
) -> [GridIndex; SAMPLES_PER_SEGMENT] {
    let t = SAMPLES_PER_SEGMENT as i64;
    let denom = 2 * t * n_seg as i64;
    let nearest = |from: usize, to: usize, q: i64| -> usize {
        let step = 2 * t * m as i64 + 2 * q + 1;
        let num = from as i64 * denom + (to as i64 - from as i64) * step;
        (num as f64 / denom as f64).round() as usize
    };
    std::array::from_fn(|q| {
        let q = q as i64;
        GridIndex::new(nearest(a.row, b.row, q), nearest(a.col, b.col, q), cols)
    })
}

/// Averaged descriptors of `n_seg` equal sub-segments between two cells.
pub fn edge_descriptor<M: CellFeatures + ?Sized>(
    map: &M,
    a: GridIndex,
    b: GridIndex,
    n_seg: usize,
) -> Result<Vec<Vec<f32>>> {
    for idx in [a, b] {
        if !map.contains(idx) {
            return Err(Error::GridOutOfBounds {
                row: idx.row,
                col: idx.col,
                rows: map.rows(),
                cols: map.cols(),
            });
        }
    }
    if n_seg == 0 {
        return Err(Error::InvalidConfig("n_seg must be >= 1".into()));
    }
    let d = map.channels();
    let mut scratch = vec![0f32; d];
    let mut out = Vec::with_capacity(n_seg);
    for m in 0..n_seg {
        let mut samples = segment_sample_cells(a, b, n_seg, m, map.cols());
        samples.sort();
        let mut acc = vec![0f64; d];
        for s in &samples {
            map.gather_cell(s.flat, &mut scratch);
            for (a, v) in acc.iter_mut().zip(&scratch) {
                *a += *v as f64;
            }
        }
        out.push(
            acc.iter()
                .map(|a| (a / SAMPLES_PER_SEGMENT as f64) as f32)
                .collect(),
        );
    }
    Ok(out)
}

pub fn save_store(store: &PrototypeStore, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_store(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<PrototypeStore> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_store(&bytes)
}

pub fn write_store<W: Write>(store: &PrototypeStore, w: &mut W) -> Result<()> {
    w.write_all(&OKPP_MAGIC)?;
    w.write_all(&[OKPP_VERSION])?;
    for blob in [
        serde_json::to_vec(&store.annotation)?,
        serde_json::to_vec(&store.config)?,
    ] {
        w.write_all(&(blob.len() as u32).to_le_bytes())?;
        w.write_all(&blob)?;
    }
    write_feature_map(&store.support, w)
}

pub fn decode_store(bytes: &[u8]) -> Result<PrototypeStore> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 5 {
        return Err(truncated(5));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != OKPP_MAGIC {
        return Err(Error::BadMagic {
            expected: OKPP_MAGIC,
            found: magic,
        });
    }
    if bytes[4] != OKPP_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let mut at = 5;
    let mut blobs: [&[u8]; 2] = [&[], &[]];
    for blob in &mut blobs {
        if bytes.len() < at + 4 {
            return Err(truncated(at + 4));
        }
        let len = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        at += 4;
        if bytes.len() < at + len {
            return Err(truncated(at + len));
        }
        *blob = &bytes[at..at + len];
        at += len;
    }
    let annotation: Annotation = serde_json::from_slice(blobs[0])?;
    let config: PrototypeConfig = serde_json::from_slice(blobs[1])?;
    let support = decode_feature_map(&bytes[at..])?;
    learn_prototypes(support, annotation, config)
}
