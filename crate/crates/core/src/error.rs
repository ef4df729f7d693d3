use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("non-finite value at flat offset {0}")]
    NonFiniteValue(usize),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("coordinate ({u}, {v}) lies outside the {width}x{height} frame")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: u32,
        height: u32,
    },

    #[error("grid index ({row}, {col}) outside a {rows}x{cols} grid")]
    GridOutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("raw image geometry is missing")]
    MissingRawGeometry,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: {left} vs {right}")]
    ChannelMismatch { left: usize, right: usize },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("duplicate keypoint id {0}")]
    DuplicateId(u32),

    #[error("too few keypoints: {0} (at least 2 are needed to form edges)")]
    TooFewKeypoints(usize),

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("zero-norm vector")]
    ZeroVector,

    #[error("empty group: {0}")]
    EmptyGroup(String),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by reading or decoding files, as opposed to
    /// semantically invalid inputs.
    pub fn is_file_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion(_)
                | Error::TruncatedPayload { .. }
                | Error::NonFiniteValue(_)
        )
    }
}
