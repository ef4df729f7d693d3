//! One-shot, instance-aware object keypoint extraction over dense patch
//! descriptor grids.
//!
//! A single annotated support feature map is turned into keypoint and edge
//! prototypes; query feature maps are then matched cell-by-cell against the
//! whole support grid, candidate keypoints are gathered per identity, and an
//! edge-scored candidate graph is pruned into per-instance keypoint groups.
//!
//! The crate is backend agnostic: feature maps arrive as OKPF files (see
//! [`feature_io`]) produced by any dense descriptor extractor.

pub mod detection;
pub mod enhance;
pub mod error;
pub mod evalkit;
pub mod feature_io;
pub mod group;
pub mod kernel;
pub mod matching;
pub mod pipeline;
pub mod prototype;
pub mod synth;

pub use detection::{DetectedInstance, DetectedKeypoint, DetectionSet};
pub use enhance::{enhance, enhance_binned, ActivationMap, BinnedMap, EnhanceConfig};
pub use error::{Error, Result};
pub use feature_io::{CellFeatures, FeatureMap, GridGeometry, GridIndex};
pub use group::{GroupConfig, Instance, InstanceGraph};
pub use matching::{CandidateKeypoint, MatchConfig, SimilarityMatrix};
pub use pipeline::{extract, ExtractConfig};
pub use prototype::{Annotation, PrototypeStore};
