//! Bundled run profiles: model architecture, scene generator, training
//! schedule and inference thresholds in one TOML-serializable unit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, Version};
use crate::pipeline::{InferConfig, ModelSpec, TrainConfig};
use crate::refine::RefinerConfig;
use crate::synth::SceneSpec;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Profile {
    pub model: ModelSpec,
    pub scene: SceneSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
    /// Scenes generated for training.
    pub train_scenes: usize,
    /// Held-out scenes for evaluation.
    pub eval_scenes: usize,
    /// Overlap threshold when matching detections to ground truth.
    pub iou_threshold: f64,
}

impl Profile {
    /// Minutes-scale profile: 128-pixel scenes, per-scale width 24.
    pub fn toy() -> Self {
        Profile {
            model: ModelSpec::toy(),
            scene: SceneSpec::default(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
            train_scenes: 500,
            eval_scenes: 100,
            iou_threshold: 0.5,
        }
    }

    /// Full-size profile; hours of CPU, kept for completeness.
    pub fn reference() -> Self {
        let backbone = BackboneConfig::with_version(Version::V3, 96, 64);
        let fused: usize = backbone.widths.iter().sum();
        let refiner = RefinerConfig {
            n_contour: 20,
            c_center: 10,
            d_model: 128,
            heads: 8,
            depth: 4,
            mlp_hidden: 256,
            pe_frequencies: 4,
            feature_channels: fused,
            embed_dim: backbone.embed_dim,
        };
        Profile {
            model: ModelSpec { backbone, refiner },
            scene: SceneSpec {
                width: 640,
                height: 640,
                min_instances: 2,
                max_instances: 6,
                ..SceneSpec::default()
            },
            train: TrainConfig {
                epochs: 250,
                decay_every: 50,
                ..TrainConfig::default()
            },
            infer: InferConfig::default(),
            train_scenes: 1000,
            eval_scenes: 500,
            iou_threshold: 0.5,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        let raw = std::fs::read_to_string(path)?;
        toml::from_str(&raw).map_err(|e| ProfileError::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ProfileError> {
        let raw = toml::to_string_pretty(self).map_err(|e| ProfileError::Parse(e.to_string()))?;
        std::fs::write(path, raw)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let p = Profile::toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profile.toml");
        p.save(&path).unwrap();
        let q = Profile::load(&path).unwrap();
        assert_eq!(p.model.backbone.widths, q.model.backbone.widths);
        assert_eq!(p.model.refiner.n_contour, q.model.refiner.n_contour);
        assert_eq!(p.scene.size_mix, q.scene.size_mix);
        assert_eq!(p.train.epochs, q.train.epochs);
        assert_eq!(p.iou_threshold, q.iou_threshold);
    }

    #[test]
    fn reference_profile_validates() {
        let p = Profile::reference();
        assert!(p.model.backbone.validate().is_ok());
        assert_eq!(
            p.model.refiner.feature_channels,
            p.model.backbone.widths.iter().sum::<usize>()
        );
    }

    #[test]
    fn bad_toml_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.toml");
        std::fs::write(&path, "model = 3").unwrap();
        assert!(matches!(
            Profile::load(&path),
            Err(ProfileError::Parse(_))
        ));
    }
}
