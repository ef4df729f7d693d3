//! Detection output: per-instance keypoints in raw-image pixels.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedKeypoint {
    pub id: u32,
    pub u: f64,
    pub v: f64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedInstance {
    pub n: usize,
    pub cohesion: f32,
    pub keypoints: Vec<DetectedKeypoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image: String,
    /// Raw frame size the coordinates refer to, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
    pub instances: Vec<DetectedInstance>,
}

impl DetectionSet {
    pub fn empty(image: impl Into<String>) -> Self {
        DetectionSet {
            image: image.into(),
            width: None,
            height: None,
            instances: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for inst in &self.instances {
            let mut seen = HashSet::new();
            for kp in &inst.keypoints {
                if !(kp.u.is_finite() && kp.v.is_finite() && kp.score.is_finite()) {
                    return Err(Error::InvalidAnnotation(format!(
                        "instance {} keypoint {} has non-finite values",
                        inst.n, kp.id
                    )));
                }
                if !seen.insert(kp.id) {
                    return Err(Error::DuplicateId(kp.id));
                }
            }
        }
        Ok(())
    }

    pub fn keypoint_count(&self) -> usize {
        self.instances.iter().map(|i| i.keypoints.len()).sum()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: DetectionSet = serde_json::from_str(text)?;
        set.validate()?;
        Ok(set)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_without_frame_fields() {
        let text = r#"{"image":"q","instances":[{"n":0,"cohesion":0.9,
            "keypoints":[{"id":1,"u":10.5,"v":3.0,"score":0.99}]}]}"#;
        let set = DetectionSet::from_json(text).unwrap();
        assert_eq!(set.width, None);
        assert_eq!(set.keypoint_count(), 1);
        let back = serde_json::to_value(&set).unwrap();
        assert!(back.get("width").is_none());
    }

    #[test]
    fn duplicate_identity_in_instance_is_rejected() {
        let text = r#"{"image":"q","instances":[{"n":0,"cohesion":0.9,
            "keypoints":[{"id":1,"u":1,"v":1,"score":1},{"id":1,"u":2,"v":2,"score":1}]}]}"#;
        assert!(matches!(
            DetectionSet::from_json(text),
            Err(Error::DuplicateId(1))
        ));
    }
}
