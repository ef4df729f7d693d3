//! Dense feature grids, their OKPF on-disk format, and the coordinate
//! mappings between the raw image, the model input and the feature grid.
//!
//! OKPF layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |-------:|-----:|----------------------------------------|
//! | 0      | 4    | magic `b"OKPF"`                        |
//! | 4      | 1    | version (`1`)                          |
//! | 5      | 4×11 | h_f, w_f, c, src_w, src_h, patch, stride, raw_w, raw_h, pad_left, pad_top |
//! | 49     | 4·n  | `h_f·w_f·c` f32 values, row-major, channel-last |
//!
//! A zero `raw_w`/`raw_h` means the raw geometry is unknown.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const OKPF_MAGIC: [u8; 4] = *b"OKPF";
pub const OKPF_VERSION: u8 = 1;
pub const OKPF_HEADER_LEN: usize = 49;

/// Size and padding of the original image before it was squared and resized
/// to the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawFrame {
    pub width: u32,
    pub height: u32,
    pub pad_left: u32,
    pub pad_top: u32,
}

/// Where the feature grid sits on the model input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridGeometry {
    pub src_w: u32,
    pub src_h: u32,
    pub patch: u32,
    pub stride: u32,
    pub raw: Option<RawFrame>,
}

impl GridGeometry {
    /// Geometry of the smallest model input that yields a `rows`×`cols` grid.
    pub fn for_grid(rows: usize, cols: usize, patch: u32, stride: u32) -> Self {
        let side = |n: usize| (n as u32 - 1) * stride + patch;
        GridGeometry {
            src_w: side(cols),
            src_h: side(rows),
            patch,
            stride,
            raw: None,
        }
    }

    pub fn with_raw(mut self, raw: RawFrame) -> Self {
        self.raw = Some(raw);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.stride == 0 || self.stride > self.patch {
            return Err(Error::InvalidShape(format!(
                "patch {} / stride {} must satisfy 1 <= stride <= patch",
                self.patch, self.stride
            )));
        }
        if self.src_w < self.patch || self.src_h < self.patch {
            return Err(Error::InvalidShape(format!(
                "model input {}x{} smaller than patch {}",
                self.src_w, self.src_h, self.patch
            )));
        }
        if let Some(raw) = self.raw {
            if raw.width == 0 || raw.height == 0 {
                return Err(Error::InvalidShape("raw frame has zero extent".into()));
            }
        }
        Ok(())
    }

    /// Grid rows and columns produced by sliding a `patch` window with `stride`.
    pub fn grid_shape(&self) -> (usize, usize) {
        let n = |src: u32| ((src - self.patch) / self.stride + 1) as usize;
        (n(self.src_h), n(self.src_w))
    }

    fn center_offset(&self) -> f64 {
        (self.patch as f64 - 1.0) / 2.0
    }
}

/// A cell of the feature grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
    pub flat: usize,
}

impl GridIndex {
    pub fn new(row: usize, col: usize, cols: usize) -> Self {
        GridIndex {
            row,
            col,
            flat: row * cols + col,
        }
    }

    pub fn from_flat(flat: usize, cols: usize) -> Self {
        GridIndex {
            row: flat / cols,
            col: flat % cols,
            flat,
        }
    }

    pub fn chebyshev(&self, other: &GridIndex) -> usize {
        self.row
            .abs_diff(other.row)
            .max(self.col.abs_diff(other.col))
    }
}

/// Read access to per-cell descriptors, shared by materialized maps and the
/// implicit binned representation.
pub trait CellFeatures {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn channels(&self) -> usize;
    /// Writes the descriptor of cell `flat` into `out` (length `channels()`).
    fn gather_cell(&self, flat: usize, out: &mut [f32]);

    fn cell_vector(&self, flat: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.channels()];
        self.gather_cell(flat, &mut out);
        out
    }

    fn contains(&self, idx: GridIndex) -> bool {
        idx.row < self.rows() && idx.col < self.cols()
    }
}

/// Dense `rows × cols × channels` grid of f32 descriptors, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f32>,
    geom: GridGeometry,
}

impl FeatureMap {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        data: Vec<f32>,
        geom: GridGeometry,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::InvalidShape(format!(
                "grid {rows}x{cols}x{channels} has an empty dimension"
            )));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::InvalidShape("element count overflows".into()))?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        geom.validate()?;
        if geom.grid_shape() != (rows, cols) {
            return Err(Error::InvalidShape(format!(
                "geometry implies a {:?} grid but the map is {rows}x{cols}",
                geom.grid_shape()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue(pos));
        }
        Ok(FeatureMap {
            rows,
            cols,
            channels,
            data,
            geom,
        })
    }

    /// Map with a synthetic geometry (patch 1, stride 1) matching its shape.
    pub fn from_grid(rows: usize, cols: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(
            rows,
            cols,
            channels,
            data,
            GridGeometry::for_grid(rows, cols, 1, 1),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geom
    }

    pub fn cell(&self, flat: usize) -> &[f32] {
        &self.data[flat * self.channels..(flat + 1) * self.channels]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.cell(row * self.cols + col)
    }

    pub fn index(&self, row: usize, col: usize) -> GridIndex {
        GridIndex::new(row, col, self.cols)
    }

    /// Same shape and geometry, new values. Used by element-wise transforms.
    pub(crate) fn with_data(&self, channels: usize, data: Vec<f32>) -> FeatureMap {
        debug_assert_eq!(data.len(), self.cells() * channels);
        FeatureMap {
            rows: self.rows,
            cols: self.cols,
            channels,
            data,
            geom: self.geom,
        }
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }
}

impl CellFeatures for FeatureMap {
    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn gather_cell(&self, flat: usize, out: &mut [f32]) {
        out.copy_from_slice(self.cell(flat));
    }
}

pub fn write_feature_file(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_feature_map(map, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut r = BufReader::new(File::open(path)?);
    read_feature_map(&mut r)
}

/// Serializes `map` as OKPF into any writer.
pub fn write_feature_map<W: Write>(map: &FeatureMap, w: &mut W) -> Result<()> {
    if let Some(pos) = map.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue(pos));
    }
    let g = &map.geom;
    let raw = g.raw.unwrap_or(RawFrame {
        width: 0,
        height: 0,
        pad_left: 0,
        pad_top: 0,
    });
    let mut header = Vec::with_capacity(OKPF_HEADER_LEN);
    header.extend_from_slice(&OKPF_MAGIC);
    header.push(OKPF_VERSION);
    for field in [
        map.rows as u32,
        map.cols as u32,
        map.channels as u32,
        g.src_w,
        g.src_h,
        g.patch,
        g.stride,
        raw.width,
        raw.height,
        raw.pad_left,
        raw.pad_top,
    ] {
        header.extend_from_slice(&field.to_le_bytes());
    }
    debug_assert_eq!(header.len(), OKPF_HEADER_LEN);
    w.write_all(&header)?;

    let mut payload = Vec::with_capacity(map.data.len() * 4);
    for v in &map.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Parses an OKPF stream; the payload must run exactly to end of stream.
pub fn read_feature_map<R: Read>(r: &mut R) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_feature_map(&bytes)
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedPayload {
            expected: OKPF_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != OKPF_MAGIC {
        return Err(Error::BadMagic {
            expected: OKPF_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < OKPF_HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: OKPF_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != OKPF_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let mut fields = [0u32; 11];
    for (i, f) in fields.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        *f = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    }
    let [rows, cols, channels, src_w, src_h, patch, stride, raw_w, raw_h, pad_left, pad_top] =
        fields;
    let count = (rows as usize)
        .checked_mul(cols as usize)
        .and_then(|n| n.checked_mul(channels as usize))
        .ok_or_else(|| Error::InvalidShape("element count overflows".into()))?;
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| Error::InvalidShape("payload size overflows".into()))?;
    let payload = &bytes[OKPF_HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let raw = (raw_w != 0 && raw_h != 0).then_some(RawFrame {
        width: raw_w,
        height: raw_h,
        pad_left,
        pad_top,
    });
    let geom = GridGeometry {
        src_w,
        src_h,
        patch,
        stride,
        raw,
    };
    FeatureMap::new(rows as usize, cols as usize, channels as usize, data, geom)
}

/// Grid cell whose patch center is nearest to model-input pixel `(u, v)`.
pub fn pixel_to_grid(u: f64, v: f64, geom: &GridGeometry) -> Result<GridIndex> {
    if !(u >= 0.0 && u < geom.src_w as f64 && v >= 0.0 && v < geom.src_h as f64) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: geom.src_w,
            height: geom.src_h,
        });
    }
    let (rows, cols) = geom.grid_shape();
    let off = geom.center_offset();
    let s = geom.stride as f64;
    let snap = |x: f64, n: usize| ((x - off) / s).round().clamp(0.0, (n - 1) as f64) as usize;
    Ok(GridIndex::new(snap(v, rows), snap(u, cols), cols))
}

/// Patch center of a grid cell, in model-input pixels `(u, v)`.
pub fn grid_to_pixel(idx: GridIndex, geom: &GridGeometry) -> (f64, f64) {
    let off = geom.center_offset();
    let s = geom.stride as f64;
    (idx.col as f64 * s + off, idx.row as f64 * s + off)
}

/// Maps model-input coordinates back onto the raw (unpadded, unresized) image.
pub fn scale_to_raw(u: f64, v: f64, geom: &GridGeometry) -> Result<(f64, f64)> {
    let raw = geom.raw.ok_or(Error::MissingRawGeometry)?;
    let side = raw.width.max(raw.height) as f64;
    let factor = side / geom.src_w as f64;
    Ok((
        u * factor - raw.pad_left as f64,
        v * factor - raw.pad_top as f64,
    ))
}
