//! Training-free feature enhancement: objectness attention followed by
//! neighborhood binning.
//!
//! The binned map has `17 × D` channels per cell, laid out as:
//!
//! * block 0: the cell itself (attended map)
//! * blocks 1-8: its 8 adjacent cells, row-major offset order (attended map)
//! * blocks 9-16: the 8 cells at Chebyshev offset `bin_spacing`, same
//!   ordering (pooled map)
//!
//! Out-of-grid neighbors are clamped to the nearest edge cell.
//!
//! [`BinnedMap`] keeps the two `D`-channel source maps and resolves blocks on
//! demand; [`BinnedMap::materialize`] produces the concatenated form.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_io::{CellFeatures, FeatureMap};

pub const BLOCKS: usize = 17;

/// Neighbor offsets `(d_row, d_col)` in block order, excluding the center.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub alpha: f64,
    pub use_objectness_attention: bool,
    pub bin_spacing: usize,
    pub pool_kernel: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            alpha: 5.0,
            use_objectness_attention: true,
            bin_spacing: 3,
            pool_kernel: 3,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.bin_spacing == 0 {
            return Err(Error::InvalidConfig("bin_spacing must be >= 1".into()));
        }
        if self.pool_kernel == 0 || self.pool_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "pool_kernel must be odd and >= 1, got {}",
                self.pool_kernel
            )));
        }
        Ok(())
    }
}

/// Per-cell objectness, min-max normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean absolute activation of each cell, before normalization.
pub fn raw_objectness(map: &FeatureMap) -> Vec<f64> {
    let d = map.channels() as f64;
    map.data()
        .par_chunks(map.channels())
        .map(|cell| cell.iter().map(|v| v.abs() as f64).sum::<f64>() / d)
        .collect()
}

pub fn objectness_activation(map: &FeatureMap) -> ActivationMap {
    let raw = raw_objectness(map);
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let values = if hi > lo {
        raw.iter()
            .map(|&v| (2.0 * (v - lo) / (hi - lo) - 1.0) as f32)
            .collect()
    } else {
        vec![0.0; raw.len()]
    };
    ActivationMap {
        rows: map.rows(),
        cols: map.cols(),
        values,
    }
}

/// Per-cell attention factor `σ(α·O_i)`.
pub fn attention_scales(act: &ActivationMap, alpha: f64) -> Vec<f32> {
    act.values
        .iter()
        .map(|&o| sigmoid(alpha * o as f64) as f32)
        .collect()
}

pub fn apply_objectness_attention(
    map: &FeatureMap,
    act: &ActivationMap,
    cfg: &EnhanceConfig,
) -> Result<FeatureMap> {
    if act.rows != map.rows() || act.cols != map.cols() || act.values.len() != map.cells() {
        return Err(Error::ShapeMismatch(format!(
            "activation {}x{} vs map {}x{}",
            act.rows,
            act.cols,
            map.rows(),
            map.cols()
        )));
    }
    let scales = attention_scales(act, cfg.alpha);
    let d = map.channels();
    let mut data = map.data().to_vec();
    data.par_chunks_mut(d)
        .zip(scales.par_iter())
        .for_each(|(cell, &s)| {
            for v in cell {
                *v *= s;
            }
        });
    Ok(map.with_data(d, data))
}

/// Stride-1 box filter with clamp-to-edge borders; `kernel` must be odd.
pub fn average_pool(map: &FeatureMap, kernel: usize) -> FeatureMap {
    assert!(kernel % 2 == 1, "pooling kernel must be odd");
    let (rows, cols, d) = (map.rows(), map.cols(), map.channels());
    let half = (kernel / 2) as isize;
    let norm = (kernel * kernel) as f64;
    let mut data = vec![0f32; map.data().len()];
    data.par_chunks_mut(cols * d)
        .enumerate()
        .for_each(|(r, out_row)| {
            let mut acc = vec![0f64; d];
            for c in 0..cols {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for dr in -half..=half {
                    let rr = clamp(r as isize + dr, rows);
                    for dc in -half..=half {
                        let cc = clamp(c as isize + dc, cols);
                        for (a, v) in acc.iter_mut().zip(map.at(rr, cc)) {
                            *a += *v as f64;
                        }
                    }
                }
                for (o, a) in out_row[c * d..(c + 1) * d].iter_mut().zip(&acc) {
                    *o = (*a / norm) as f32;
                }
            }
        });
    map.with_data(d, data)
}

pub fn average_pool_3x3(map: &FeatureMap) -> FeatureMap {
    average_pool(map, 3)
}

#[inline]
fn clamp(x: isize, n: usize) -> usize {
    x.clamp(0, n as isize - 1) as usize
}

/// Which `D`-channel map a block reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockSource {
    Attended,
    Pooled,
}

pub fn block_source(block: usize) -> BlockSource {
    if block <= 8 {
        BlockSource::Attended
    } else {
        BlockSource::Pooled
    }
}

/// Implicit `17 × D` binned map backed by the attended and pooled maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedMap {
    attended: FeatureMap,
    pooled: FeatureMap,
    spacing: usize,
}

impl BinnedMap {
    pub fn new(attended: FeatureMap, pooled: FeatureMap, spacing: usize) -> Result<Self> {
        if attended.rows() != pooled.rows()
            || attended.cols() != pooled.cols()
            || attended.channels() != pooled.channels()
        {
            return Err(Error::ShapeMismatch(format!(
                "attended {}x{}x{} vs pooled {}x{}x{}",
                attended.rows(),
                attended.cols(),
                attended.channels(),
                pooled.rows(),
                pooled.cols(),
                pooled.channels()
            )));
        }
        if spacing == 0 {
            return Err(Error::InvalidConfig("bin_spacing must be >= 1".into()));
        }
        Ok(BinnedMap {
            attended,
            pooled,
            spacing,
        })
    }

    pub fn attended(&self) -> &FeatureMap {
        &self.attended
    }

    pub fn pooled(&self) -> &FeatureMap {
        &self.pooled
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn base_channels(&self) -> usize {
        self.attended.channels()
    }

    pub fn source(&self, block: usize) -> &FeatureMap {
        match block_source(block) {
            BlockSource::Attended => &self.attended,
            BlockSource::Pooled => &self.pooled,
        }
    }

    /// Flat index of the source-map cell feeding `block` of cell `(row, col)`.
    pub fn block_cell(&self, row: usize, col: usize, block: usize) -> usize {
        let (rows, cols) = (self.attended.rows(), self.attended.cols());
        if block == 0 {
            return row * cols + col;
        }
        let (dr, dc) = NEIGHBOR_OFFSETS[(block - 1) % 8];
        let scale = if block <= 8 { 1 } else { self.spacing as isize };
        let r = clamp(row as isize + dr * scale, rows);
        let c = clamp(col as isize + dc * scale, cols);
        r * cols + c
    }

    /// `block_cell` for every cell of the grid, in flat order.
    pub fn block_table(&self, block: usize) -> Vec<usize> {
        let cols = self.attended.cols();
        (0..self.attended.cells())
            .map(|flat| self.block_cell(flat / cols, flat % cols, block))
            .collect()
    }

    /// Squared L2 norm of every binned cell, accumulated block by block.
    pub fn squared_norms(&self) -> Vec<f64> {
        let d = self.base_channels();
        let att = crate::kernel::squared_norms(self.attended.data(), d);
        let pool = crate::kernel::squared_norms(self.pooled.data(), d);
        let cols = self.attended.cols();
        (0..self.attended.cells())
            .map(|flat| {
                let (r, c) = (flat / cols, flat % cols);
                let mut acc = 0f64;
                for b in 0..BLOCKS {
                    let src = self.block_cell(r, c, b);
                    acc += match block_source(b) {
                        BlockSource::Attended => att[src],
                        BlockSource::Pooled => pool[src],
                    } as f64;
                }
                acc
            })
            .collect()
    }

    pub fn materialize(&self) -> FeatureMap {
        let d_b = self.channels();
        let mut data = vec![0f32; self.attended.cells() * d_b];
        data.par_chunks_mut(d_b)
            .enumerate()
            .for_each(|(flat, out)| self.gather_cell(flat, out));
        self.attended.with_data(d_b, data)
    }
}

impl CellFeatures for BinnedMap {
    fn rows(&self) -> usize {
        self.attended.rows()
    }

    fn cols(&self) -> usize {
        self.attended.cols()
    }

    fn channels(&self) -> usize {
        BLOCKS * self.attended.channels()
    }

    fn gather_cell(&self, flat: usize, out: &mut [f32]) {
        let d = self.base_channels();
        let cols = self.attended.cols();
        let (r, c) = (flat / cols, flat % cols);
        for (b, chunk) in out.chunks_exact_mut(d).enumerate() {
            chunk.copy_from_slice(self.source(b).cell(self.block_cell(r, c, b)));
        }
    }
}

pub fn neighborhood_binning(
    attended: &FeatureMap,
    pooled: &FeatureMap,
    cfg: &EnhanceConfig,
) -> Result<FeatureMap> {
    Ok(BinnedMap::new(attended.clone(), pooled.clone(), cfg.bin_spacing)?.materialize())
}

/// Attention (if enabled), pooling and binning, kept in implicit form.
pub fn enhance_binned(map: &FeatureMap, cfg: &EnhanceConfig) -> Result<BinnedMap> {
    cfg.validate()?;
    let attended = if cfg.use_objectness_attention {
        apply_objectness_attention(map, &objectness_activation(map), cfg)?
    } else {
        map.clone()
    };
    let pooled = average_pool(&attended, cfg.pool_kernel);
    BinnedMap::new(attended, pooled, cfg.bin_spacing)
}

pub fn enhance(map: &FeatureMap, cfg: &EnhanceConfig) -> Result<FeatureMap> {
    Ok(enhance_binned(map, cfg)?.materialize())
}
