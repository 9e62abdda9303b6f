use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::FrontendConfig;
use crate::audio2pose::PoseDecoderConfig;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseVector};
use crate::lmk2video::Lmk2VideoConfig;
use crate::render::RenderStyle;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshRegressorConfig {
    pub hidden: usize,
}

impl Default for MeshRegressorConfig {
    fn default() -> Self {
        Self { hidden: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    /// Focal length as a fraction of the image size.
    pub focal_scale: f64,
    /// Head translation of the neutral pose; pose models predict offsets from it.
    pub rest_translation: [f64; 3],
    pub z_near: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal_scale: 0.9,
            rest_translation: [0.0, 0.0, 2.5],
            z_near: 0.1,
        }
    }
}

impl CameraConfig {
    pub fn intrinsics(&self, image_size: usize) -> Result<CameraIntrinsics> {
        let base = CameraIntrinsics::for_image(image_size, self.focal_scale);
        CameraIntrinsics::new(base.fx, base.fy, base.cx, base.cy, self.z_near)
    }

    pub fn rest_pose(&self) -> PoseVector {
        PoseVector {
            rotation: [0.0; 3],
            translation: self.rest_translation,
        }
    }
}

/// Size and dynamics of the procedural training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub clips: usize,
    /// The last `val_clips` clips form the validation split.
    pub val_clips: usize,
    pub seconds: f64,
    /// Lower-lip drop per unit of frame RMS.
    pub lip_gain: f64,
    /// Brow raise per unit of low-band RMS.
    pub brow_gain: f64,
    pub yaw_amplitude: f64,
    pub pitch_amplitude: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            clips: 32,
            val_clips: 4,
            seconds: 2.0,
            lip_gain: 1.5,
            brow_gain: 1.0,
            yaw_amplitude: 0.25,
            pitch_amplitude: 0.12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    /// Diffusion stage for `train-l2v` when not given on the command line.
    pub stage: u8,
    /// Learning rate of the full-scale recipe.
    pub lr: f64,
    /// Desk-scale override of `lr`; `null` trains with `lr`.
    pub desk_lr: Option<f64>,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub val_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            lr: 1e-5,
            desk_lr: Some(1e-3),
            steps: 500,
            batch: 16,
            seed: 0,
            val_every: 50,
        }
    }
}

impl TrainingConfig {
    pub fn effective_lr(&self) -> f64 {
        self.desk_lr.unwrap_or(self.lr)
    }

    pub fn to_train_config(&self, lr: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lr,
            steps: self.steps,
            batch: self.batch,
            val_every: self.val_every,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            ckpt_dir: "ckpt".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub audio_frontend: FrontendConfig,
    pub audio2mesh: MeshRegressorConfig,
    pub audio2pose: PoseDecoderConfig,
    pub camera: CameraConfig,
    pub render: RenderStyle,
    pub lmk2video: Lmk2VideoConfig,
    pub dataset: DatasetConfig,
    pub training: TrainingConfig,
    pub paths: PathsConfig,
}

impl PipelineConfig {
    /// Desk configuration: every default, 64×64 images.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.audio_frontend.validate()?;
        self.audio2pose.validate()?;
        self.lmk2video.validate()?;
        self.render.validate()?;
        self.camera.intrinsics(self.render.image_size)?;
        if self.audio2mesh.hidden == 0 {
            return Err(Error::Config("audio2mesh.hidden must be positive".into()));
        }
        if self.render.image_size != self.lmk2video.image_size {
            return Err(Error::Config(format!(
                "render.image_size {} must equal lmk2video.image_size {}",
                self.render.image_size, self.lmk2video.image_size
            )));
        }
        let d = &self.dataset;
        if d.clips == 0 || d.val_clips >= d.clips || !(d.seconds > 0.0) {
            return Err(Error::Config(
                "dataset needs clips > val_clips and a positive duration".into(),
            ));
        }
        if ![d.lip_gain, d.brow_gain, d.yaw_amplitude, d.pitch_amplitude]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::Config("dataset gains must be finite".into()));
        }
        let t = &self.training;
        if t.stage != 1 && t.stage != 2 {
            return Err(Error::Config(format!("training.stage must be 1 or 2, got {}", t.stage)));
        }
        if t.desk_lr.is_some_and(|v| !(v >= 0.0)) {
            return Err(Error::Config("training.desk_lr must be non-negative".into()));
        }
        t.to_train_config(t.effective_lr(), t.seed).validate()
    }

    /// Logs the resolved configuration.
    pub fn log_resolved(&self) {
        log::info!("resolved config:\n{}", self.to_json());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = PipelineConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            PipelineConfig::from_json(r#"{"lmk2video": {"image_size": 64, "colour": 1}}"#),
            Err(Error::Config(_))
        ));
        assert!(PipelineConfig::from_json(r#"{"extra": {}}"#).is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = PipelineConfig::from_json(
            r#"{"render": {"image_size": 32}, "lmk2video": {"image_size": 32}, "training": {"lr": 0.001, "desk_lr": null}}"#,
        )
        .unwrap();
        assert_eq!(cfg.lmk2video.latent_factor, 4);
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.training.effective_lr(), 1e-3);
        let full = PipelineConfig::from_json(r#"{"training": {"desk_lr": null}}"#).unwrap();
        assert_eq!(full.training.effective_lr(), 1e-5);
        assert!(PipelineConfig::from_json(r#"{"render": {"image_size": 32}}"#).is_err());
    }
}
