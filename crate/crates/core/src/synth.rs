//! Deterministic synthetic fixtures: a support map holding one square
//! "object" of random descriptors, and a query map holding `M` translated
//! copies of that object over an independent random background.
//!
//! Descriptor directions are box-smoothed Gaussian fields, so neighboring
//! cells are correlated the way dense backbone features are. Magnitudes mimic
//! objectness-aware backbones: object cells have a larger mean absolute
//! activation than background cells, and the object
//! carries the global minimum and maximum activation so attention
//! normalization is identical in support and query. Keypoints are kept far
//! enough inside the object that their binned descriptors only see object
//! cells, which makes clean copies match exactly.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evalkit::{GroundTruth, GtInstance, GtKeypoint};
use crate::feature_io::{
    grid_to_pixel, scale_to_raw, write_feature_file, FeatureMap, GridGeometry, GridIndex, RawFrame,
};
use crate::prototype::{AnnotatedKeypoint, Annotation};

pub const SUPPORT_FILE: &str = "support.okpf";
pub const QUERY_FILE: &str = "query.okpf";
pub const ANNOTATION_FILE: &str = "annotation.json";
pub const GT_FILE: &str = "gt.json";
pub const QUERY_IMAGE_ID: &str = "query";

/// Cells between a keypoint and the object border; binning reads up to
/// 4 cells away (spaced neighbors at 3 plus the 3×3 pooling window).
const KEYPOINT_MARGIN: usize = 5;
const MIN_KEYPOINT_SEPARATION: usize = 2;
const INSTANCE_GAP: usize = 2;
const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub instances: usize,
    pub keypoints: usize,
    pub channels: usize,
    /// Standard deviation of additive query noise, relative to the clean
    /// query's feature RMS.
    pub noise: f64,
    pub seed: u64,
    pub grid: usize,
    pub object_size: usize,
    /// Half-width of the box filter applied to descriptor directions; 0
    /// gives spatially independent cells.
    pub smooth_radius: usize,
    pub patch: u32,
    pub stride: u32,
    pub raw_size: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            instances: 2,
            keypoints: 4,
            channels: 32,
            noise: 0.0,
            seed: 7,
            grid: 64,
            object_size: 16,
            smooth_radius: 2,
            patch: 8,
            stride: 4,
            raw_size: 512,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.keypoints < 2 {
            return bad(format!("need at least 2 keypoints, got {}", self.keypoints));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.object_size < 2 * KEYPOINT_MARGIN + 1 {
            return bad(format!(
                "object size {} leaves no room for keypoints (minimum {})",
                self.object_size,
                2 * KEYPOINT_MARGIN + 1
            ));
        }
        if self.object_size > self.grid {
            return bad(format!(
                "object size {} exceeds grid {}",
                self.object_size, self.grid
            ));
        }
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch || self.raw_size == 0 {
            return bad("invalid patch/stride/raw size".into());
        }
        Ok(())
    }

    fn geometry(&self) -> GridGeometry {
        GridGeometry::for_grid(self.grid, self.grid, self.patch, self.stride).with_raw(RawFrame {
            width: self.raw_size,
            height: self.raw_size,
            pad_left: 0,
            pad_top: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFixture {
    pub support: FeatureMap,
    pub annotation: Annotation,
    pub query: FeatureMap,
    pub ground_truth: GroundTruth,
    /// Top-left cell of the object in the support map.
    pub support_origin: (usize, usize),
    /// Top-left cell of every planted copy in the query map.
    pub placements: Vec<(usize, usize)>,
    /// Keypoint cells relative to the object origin, by identity - 1.
    pub keypoint_offsets: Vec<(usize, usize)>,
}

impl SynthFixture {
    /// Query grid cell of keypoint `id` on planted instance `n`.
    pub fn planted_cell(&self, n: usize, id: u32) -> GridIndex {
        let (r0, c0) = self.placements[n];
        let (dr, dc) = self.keypoint_offsets[id as usize - 1];
        GridIndex::new(r0 + dr, c0 + dc, self.query.cols())
    }

    pub fn support_cell(&self, id: u32) -> GridIndex {
        let (r0, c0) = self.support_origin;
        let (dr, dc) = self.keypoint_offsets[id as usize - 1];
        GridIndex::new(r0 + dr, c0 + dc, self.support.cols())
    }

    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_feature_file(&self.support, dir.join(SUPPORT_FILE))?;
        write_feature_file(&self.query, dir.join(QUERY_FILE))?;
        fs::write(
            dir.join(ANNOTATION_FILE),
            serde_json::to_string_pretty(&self.annotation)?,
        )?;
        self.ground_truth.write(dir.join(GT_FILE))?;
        Ok(())
    }
}

/// `rows × cols` field of `d`-dim directions: i.i.d. Gaussians box-summed
/// over a `(2r+1)²` window.
fn smooth_field(rng: &mut ChaCha8Rng, rows: usize, cols: usize, d: usize, r: usize) -> Vec<f64> {
    let (pr, pc) = (rows + 2 * r, cols + 2 * r);
    let raw: Vec<f64> = (0..pr * pc * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut out = vec![0f64; rows * cols * d];
    for row in 0..rows {
        for col in 0..cols {
            let dst = &mut out[(row * cols + col) * d..(row * cols + col + 1) * d];
            for wr in row..=row + 2 * r {
                for wc in col..=col + 2 * r {
                    let src = &raw[(wr * pc + wc) * d..(wr * pc + wc + 1) * d];
                    for (o, v) in dst.iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Rescales a direction to a mean absolute activation of `objectness`.
fn scale_cell(dir: &[f64], objectness: f64, out: &mut [f32]) {
    let mean_abs = dir.iter().map(|v| v.abs()).sum::<f64>() / dir.len() as f64;
    let scale = if mean_abs > 0.0 {
        objectness / mean_abs
    } else {
        0.0
    };
    for (o, v) in out.iter_mut().zip(dir) {
        *o = (v * scale) as f32;
    }
}

fn background(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<f32> {
    let d = cfg.channels;
    let dirs = smooth_field(rng, cfg.grid, cfg.grid, d, cfg.smooth_radius);
    let mut data = vec![0f32; cfg.grid * cfg.grid * d];
    for (cell, dir) in data.chunks_exact_mut(d).zip(dirs.chunks_exact(d)) {
        scale_cell(dir, rng.random_range(0.2..0.5), cell);
    }
    data
}

fn paste(data: &mut [f32], grid: usize, d: usize, object: &[f32], side: usize, at: (usize, usize)) {
    for r in 0..side {
        let dst = ((at.0 + r) * grid + at.1) * d;
        data[dst..dst + side * d].copy_from_slice(&object[r * side * d..(r + 1) * side * d]);
    }
}

fn pick_keypoints(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Vec<(usize, usize)>> {
    let lo = KEYPOINT_MARGIN;
    let hi = cfg.object_size - KEYPOINT_MARGIN; // exclusive
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut pts: Vec<(usize, usize)> = Vec::with_capacity(cfg.keypoints);
        let mut stuck = 0;
        while pts.len() < cfg.keypoints && stuck < 200 {
            let p = (rng.random_range(lo..hi), rng.random_range(lo..hi));
            let far = pts
                .iter()
                .all(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1)) >= MIN_KEYPOINT_SEPARATION);
            if far {
                pts.push(p);
            } else {
                stuck += 1;
            }
        }
        if pts.len() == cfg.keypoints {
            return Ok(pts);
        }
    }
    Err(Error::InvalidConfig(format!(
        "cannot place {} separated keypoints inside a {}-cell object",
        cfg.keypoints, cfg.object_size
    )))
}

fn place_instances(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Vec<(usize, usize)>> {
    let side = cfg.object_size;
    let span = cfg.grid - side + 1;
    let overlaps = |a: (usize, usize), b: (usize, usize)| {
        let reach = side + INSTANCE_GAP;
        a.0.abs_diff(b.0) < reach && a.1.abs_diff(b.1) < reach
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut placed: Vec<(usize, usize)> = Vec::with_capacity(cfg.instances);
        for _ in 0..cfg.instances {
            let p = (rng.random_range(0..span), rng.random_range(0..span));
            if placed.iter().all(|&q| !overlaps(p, q)) {
                placed.push(p);
            } else {
                break;
            }
        }
        if placed.len() == cfg.instances {
            return Ok(placed);
        }
    }
    Err(Error::InvalidConfig(format!(
        "cannot fit {} non-overlapping {}-cell instances in a {}x{} grid",
        cfg.instances, side, cfg.grid, cfg.grid
    )))
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthFixture> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, side, grid) = (cfg.channels, cfg.object_size, cfg.grid);
    let geom = cfg.geometry();

    let dirs = smooth_field(&mut rng, side, side, d, cfg.smooth_radius);
    let mut object = vec![0f32; side * side * d];
    for (i, (cell, dir)) in object
        .chunks_exact_mut(d)
        .zip(dirs.chunks_exact(d))
        .enumerate()
    {
        let o = match i {
            0 => 1.5,
            i if i == side * side - 1 => 0.1,
            _ => rng.random_range(0.6..1.2),
        };
        scale_cell(dir, o, cell);
    }
    let offsets = pick_keypoints(&mut rng, cfg)?;

    let support_origin = (
        rng.random_range(0..grid - side + 1),
        rng.random_range(0..grid - side + 1),
    );
    let mut support = background(&mut rng, cfg);
    paste(&mut support, grid, d, &object, side, support_origin);

    let placements = place_instances(&mut rng, cfg)?;
    let mut query = background(&mut rng, cfg);
    for &at in &placements {
        paste(&mut query, grid, d, &object, side, at);
    }
    if cfg.noise > 0.0 {
        let rms =
            (query.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / query.len() as f64).sqrt();
        let sigma = cfg.noise * rms;
        for v in query.iter_mut() {
            *v += (rng.sample::<f64, _>(StandardNormal) * sigma) as f32;
        }
    }

    let half = cfg.stride as f64 / 2.0;
    let annotation = Annotation {
        keypoints: offsets
            .iter()
            .enumerate()
            .map(|(i, &(dr, dc))| {
                let cell = GridIndex::new(support_origin.0 + dr, support_origin.1 + dc, grid);
                let (u, v) = grid_to_pixel(cell, &geom);
                // stay strictly closer to this cell's center than to any other
                let ju = rng.random_range(-0.9..0.9) * half;
                let jv = rng.random_range(-0.9..0.9) * half;
                AnnotatedKeypoint {
                    id: i as u32 + 1,
                    u: u + ju,
                    v: v + jv,
                }
            })
            .collect(),
        excluded_edges: Vec::new(),
    };

    let ground_truth = GroundTruth {
        image: QUERY_IMAGE_ID.to_string(),
        width: cfg.raw_size,
        height: cfg.raw_size,
        instances: placements
            .iter()
            .enumerate()
            .map(|(n, &(r0, c0))| GtInstance {
                id: n as u32 + 1,
                keypoints: offsets
                    .iter()
                    .enumerate()
                    .map(|(i, &(dr, dc))| {
                        let (u, v) = grid_to_pixel(GridIndex::new(r0 + dr, c0 + dc, grid), &geom);
                        let (u, v) = scale_to_raw(u, v, &geom).expect("raw frame is set");
                        GtKeypoint {
                            id: i as u32 + 1,
                            u,
                            v,
                        }
                    })
                    .collect(),
            })
            .collect(),
    };

    Ok(SynthFixture {
        support: FeatureMap::new(grid, grid, d, support, geom)?,
        annotation,
        query: FeatureMap::new(grid, grid, d, query, geom)?,
        ground_truth,
        support_origin,
        placements,
        keypoint_offsets: offsets,
    })
}
