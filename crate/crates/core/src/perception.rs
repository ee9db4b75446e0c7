//! Simulated object detector and the label-keyed object registry.
//!
//! Objects are registered the first time they are recognized; every later
//! detection only refreshes the stored pose. Entries are never removed, so a
//! pose can go stale and the robot will still act on it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::executor::{ObjectShape, WorldState};
use crate::geometry::Pose2;
use crate::ConfigError;

/// An object placed in a scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub shape: ObjectShape,
    pub true_pose: Pose2,
    #[serde(default = "default_true")]
    pub graspable: bool,
}

fn default_true() -> bool {
    true
}

/// Parses a scene file (a JSON list of objects) and checks label uniqueness.
pub fn parse_scene(text: &str) -> Result<Vec<SceneObject>, ConfigError> {
    let objects: Vec<SceneObject> =
        serde_json::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    validate_scene(&objects)?;
    Ok(objects)
}

pub fn load_scene(path: &Path) -> Result<Vec<SceneObject>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io(path.display().to_string(), e.to_string()))?;
    parse_scene(&text)
}

pub fn validate_scene(objects: &[SceneObject]) -> Result<(), ConfigError> {
    let mut seen = std::collections::HashSet::new();
    for obj in objects {
        if !seen.insert(obj.label.as_str()) {
            return Err(ConfigError::Invalid(format!(
                "duplicate scene label `{}`",
                obj.label
            )));
        }
        if !(obj.shape.grasp_width > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "`{}` needs a positive grasp_width",
                obj.label
            )));
        }
        if !obj.true_pose.is_finite() {
            return Err(ConfigError::Invalid(format!(
                "`{}` has a non-finite pose",
                obj.label
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub measured_pose: Pose2,
    pub confidence: f64,
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub detection_probability: f64,
    pub position_noise_sigma: f64,
    pub confidence_threshold: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            detection_probability: 1.0,
            position_noise_sigma: 0.0,
            confidence_threshold: 0.5,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, v) in [
            ("detection_probability", self.detection_probability),
            ("confidence_threshold", self.confidence_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if !(self.position_noise_sigma >= 0.0 && self.position_noise_sigma.is_finite()) {
            return Err(ConfigError::Invalid(
                "position_noise_sigma must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One detector pass over the live world. Each object is seen independently
/// with `detection_probability`; positions get isotropic Gaussian noise.
pub fn detect<R: Rng + ?Sized>(
    world: &WorldState,
    config: &DetectorConfig,
    t: f64,
    rng: &mut R,
) -> Vec<Detection> {
    let noise =
        Normal::new(0.0, config.position_noise_sigma).expect("sigma validated as finite and >= 0");
    let mut out = Vec::new();
    for obj in &world.objects {
        if !rng.random_bool(config.detection_probability.clamp(0.0, 1.0)) {
            continue;
        }
        let (dx, dy) = if config.position_noise_sigma > 0.0 {
            (noise.sample(rng), noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        let lo = config.confidence_threshold;
        let confidence = if lo >= 1.0 {
            1.0
        } else {
            rng.random_range(lo..=1.0)
        };
        out.push(Detection {
            label: obj.label.clone(),
            measured_pose: Pose2::new(obj.pose.x + dx, obj.pose.y + dy, obj.pose.yaw),
            confidence,
            timestamp: t,
        });
    }
    out
}

/// Drops detections under the confidence threshold.
pub fn filter_confident(detections: Vec<Detection>, threshold: f64) -> Vec<Detection> {
    detections
        .into_iter()
        .filter(|d| d.confidence >= threshold)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub registered_at: f64,
    pub current_pose: Pose2,
    pub last_update: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestSummary {
    pub registered: usize,
    pub updated: usize,
    pub stale: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectRegistry {
    entries: BTreeMap<String, RegistryEntry>,
    stale_detections: u64,
}

impl ObjectRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers unseen labels and refreshes known ones. Detections older
    /// than an entry's last update are dropped and counted as stale.
    pub fn ingest(&mut self, detections: &[Detection]) -> IngestSummary {
        let mut summary = IngestSummary::default();
        for det in detections {
            match self.entries.get_mut(&det.label) {
                None => {
                    self.entries.insert(
                        det.label.clone(),
                        RegistryEntry {
                            registered_at: det.timestamp,
                            current_pose: det.measured_pose,
                            last_update: det.timestamp,
                        },
                    );
                    summary.registered += 1;
                }
                Some(entry) if det.timestamp < entry.last_update => {
                    self.stale_detections += 1;
                    summary.stale += 1;
                }
                Some(entry) => {
                    entry.current_pose = det.measured_pose;
                    entry.last_update = det.timestamp;
                    summary.updated += 1;
                }
            }
        }
        summary
    }

    pub fn lookup(&self, label: &str) -> Option<Pose2> {
        self.entries.get(label).map(|e| e.current_pose)
    }

    pub fn entry(&self, label: &str) -> Option<&RegistryEntry> {
        self.entries.get(label)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &RegistryEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stale_detections(&self) -> u64 {
        self.stale_detections
    }
}
