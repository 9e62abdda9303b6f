//! Landmark-driven video synthesis with a small latent diffusion model.
//!
//! A U-shaped denoiser works on space-to-depth latents. Appearance comes from
//! a reference network whose features join the denoiser's spatial attention
//! as extra keys and values. Landmark guidance comes from a convolutional
//! pose guider whose per-scale outputs are added to the down path. A
//! temporal motion module mixes information across the frames of a clip.

mod codec;
mod nets;
mod schedule;
mod stages;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use codec::{decode_latent, encode_latent, pose_tensor};
pub use nets::{init_video_model, Conditioning, DenoiseOptions, LatentClip, ProbeInputs, VideoModel, MOTION_PREFIX};
pub use schedule::{ddim_sample, ddim_sample_from, ddim_timesteps, make_schedule, q_sample, NoiseSchedule};
pub use stages::{
    evaluate_loss, generate_clip, generate_latents, temporal_proxy, train_stage1, train_stage2, EncodedClip, StageHistory, VideoClip, VideoDataset,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lmk2VideoConfig {
    pub image_size: usize,
    pub latent_factor: usize,
    pub frames_per_clip: usize,
    pub t_steps: usize,
    pub ddim_steps: usize,
    /// Learning rate of the full-scale recipe.
    pub lr: f64,
    /// Desk-scale override of `lr`; `null` trains with `lr`.
    pub desk_lr: Option<f64>,
    /// Training stage the `lr` applies to by default (1 or 2).
    pub stage: u8,
    pub base_channels: usize,
    pub heads: usize,
    pub guider_channels: usize,
    pub weight_decay: f64,
}

impl Default for Lmk2VideoConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            latent_factor: 4,
            frames_per_clip: 8,
            t_steps: 100,
            ddim_steps: 20,
            lr: 1e-5,
            desk_lr: Some(1e-3),
            stage: 1,
            base_channels: 32,
            heads: 4,
            guider_channels: 16,
            weight_decay: 1e-2,
        }
    }
}

impl Lmk2VideoConfig {
    pub fn latent_channels(&self) -> usize {
        3 * self.latent_factor * self.latent_factor
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.latent_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("lmk2video: {msg}")));
        if self.latent_factor < 2 || !self.latent_factor.is_power_of_two() {
            return bad(format!("latent_factor {} must be a power of two ≥ 2", self.latent_factor));
        }
        if self.image_size == 0 || self.image_size % (4 * self.latent_factor) != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of 4 × latent_factor",
                self.image_size
            ));
        }
        if self.frames_per_clip == 0 || self.t_steps == 0 || self.ddim_steps == 0 || self.ddim_steps > self.t_steps {
            return bad("frames_per_clip, t_steps and 1 ≤ ddim_steps ≤ t_steps are required".into());
        }
        if self.stage != 1 && self.stage != 2 {
            return bad(format!("stage must be 1 or 2, got {}", self.stage));
        }
        let b = self.base_channels;
        if b == 0 || self.heads == 0 || b % self.heads != 0 || self.guider_channels == 0 {
            return bad(format!("base_channels {b} must be a positive multiple of heads {}", self.heads));
        }
        if !(self.lr >= 0.0) || self.desk_lr.is_some_and(|v| !(v >= 0.0)) || !(self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn effective_lr(&self) -> f64 {
        self.desk_lr.unwrap_or(self.lr)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.t_steps)
    }
}
