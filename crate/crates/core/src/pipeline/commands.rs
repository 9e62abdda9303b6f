//! Training entry points that read the corpus from `paths.data_dir` and
//! write checkpoints under `paths.ckpt_dir/<stage>`.

use std::path::Path;

use super::checkpoint::save_checkpoint;
use super::config::PipelineConfig;
use super::infer::{checkpoint_dir, load_stage};
use super::synth::SyntheticDataset;
use crate::audio::{AudioBackbone, LogMelBackbone};
use crate::audio2mesh::{init_mesh_regressor, train_audio2mesh};
use crate::audio2pose::{init_pose_decoder, train_audio2pose};
use crate::error::{Error, Result};
use crate::geometry::FaceTopology;
use crate::learning::Params;
use crate::lmk2video::{init_video_model, train_stage1, train_stage2, VideoModel};
use crate::train::LossHistory;

pub const HISTORY_FILE: &str = "history.json";

fn save_stage(dir: &Path, params: &Params, history: &LossHistory) -> Result<()> {
    save_checkpoint(params, dir)?;
    let path = dir.join(HISTORY_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(history)?).map_err(|e| Error::io(path, e))
}

fn log_history(stage: &str, h: &LossHistory) {
    if let (Some(a), Some(b)) = (h.initial_val(), h.final_val()) {
        log::info!("{stage}: validation loss {a:.6} -> {b:.6}");
    }
}

pub fn train_a2m(cfg: &PipelineConfig, data: &SyntheticDataset, seed: u64) -> Result<LossHistory> {
    let backbone = LogMelBackbone::new(cfg.audio_frontend.clone())?;
    let ds = data.mesh_dataset(&backbone)?;
    let model = init_mesh_regressor(backbone.feature_dim(), &FaceTopology::desk(), cfg.audio2mesh.hidden, seed)?;
    let tc = cfg.training.to_train_config(cfg.training.effective_lr(), seed);
    let (model, history) = train_audio2mesh(model, &ds, &tc).map_err(|e| e.in_stage("audio2mesh"))?;
    log_history("audio2mesh", &history);
    save_stage(&checkpoint_dir(cfg, "audio2mesh"), &model.params, &history)?;
    Ok(history)
}

pub fn train_a2p(cfg: &PipelineConfig, data: &SyntheticDataset, seed: u64) -> Result<LossHistory> {
    let backbone = LogMelBackbone::new(cfg.audio_frontend.clone())?;
    let ds = data.pose_dataset(&backbone, &cfg.camera.rest_pose())?;
    let model = init_pose_decoder(backbone.feature_dim(), &cfg.audio2pose, seed)?;
    let tc = cfg.training.to_train_config(cfg.training.effective_lr(), seed);
    let (model, history) = train_audio2pose(model, &ds, &tc).map_err(|e| e.in_stage("audio2pose"))?;
    log_history("audio2pose", &history);
    save_stage(&checkpoint_dir(cfg, "audio2pose"), &model.params, &history)?;
    Ok(history)
}

/// Stage 1 starts from a fresh model; stage 2 continues from the saved
/// stage-1 checkpoint and overwrites it.
pub fn train_l2v(cfg: &PipelineConfig, data: &SyntheticDataset, stage: u8, seed: u64) -> Result<LossHistory> {
    let model = match stage {
        1 => init_video_model(&cfg.lmk2video, seed)?,
        2 => VideoModel::from_params(load_stage(cfg, "lmk2video")?, &cfg.lmk2video)?,
        s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
    };
    let tc = cfg.training.to_train_config(cfg.lmk2video.effective_lr(), seed);
    let video = data.video_dataset();
    let (model, history) = if stage == 1 {
        train_stage1(model, &video, &tc)
    } else {
        train_stage2(model, &video, &tc)
    }
    .map_err(|e| e.in_stage("lmk2video"))?;
    log_history(&format!("lmk2video stage {stage}"), &history);
    save_stage(&checkpoint_dir(cfg, "lmk2video"), &model.params, &history)?;
    Ok(history)
}
