//! End-to-end inference: speech → mesh and pose → landmarks → pose images → frames.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::{load_checkpoint, MANIFEST};
use super::config::PipelineConfig;
use super::synth::{absolute_from_rest, frame_name};
use crate::audio::{load_audio, AudioBackbone, LogMelBackbone};
use crate::audio2mesh::{mesh_forward, MeshRegressor};
use crate::audio2pose::{decode_autoregressive, PoseDecoder};
use crate::error::{Error, Result};
use crate::geometry::{project, project_sequence, FaceTopology, LandmarkSequence, MeshSequence, PoseSequence};
use crate::learning::Params;
use crate::lmk2video::{generate_clip, VideoModel};
use crate::render::{render_pose_image, render_sequence, Image};

pub const STAGES: [&str; 3] = ["audio2mesh", "audio2pose", "lmk2video"];

pub fn checkpoint_dir(cfg: &PipelineConfig, stage: &str) -> PathBuf {
    cfg.paths.ckpt_dir.join(stage)
}

/// Loads one stage's parameters, reporting a missing directory as a
/// missing checkpoint for that stage.
pub fn load_stage(cfg: &PipelineConfig, stage: &str) -> Result<Params> {
    let dir = checkpoint_dir(cfg, stage);
    if !dir.join(MANIFEST).is_file() {
        return Err(Error::MissingCheckpoint {
            stage: stage.to_string(),
            path: dir,
        });
    }
    load_checkpoint(&dir)
}

/// The three trained models used at inference time.
#[derive(Clone, Debug)]
pub struct Models {
    pub mesh: MeshRegressor,
    pub pose: PoseDecoder,
    pub video: VideoModel,
}

impl Models {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let params: Vec<Params> = STAGES.iter().map(|s| load_stage(cfg, s)).collect::<Result<_>>()?;
        let [m, p, v]: [Params; 3] = params.try_into().expect("three stages");
        Ok(Self {
            mesh: MeshRegressor::from_params(m).map_err(|e| e.in_stage("audio2mesh"))?,
            pose: PoseDecoder::from_params(p, &cfg.audio2pose).map_err(|e| e.in_stage("audio2pose"))?,
            video: VideoModel::from_params(v, &cfg.lmk2video).map_err(|e| e.in_stage("lmk2video"))?,
        })
    }
}

/// Seed for clip chunk `i` of a run seeded with `seed`.
pub fn chunk_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Animates a landmark image sequence in chunks of `frames_per_clip`,
/// sampling chunks in parallel with per-chunk seeds.
pub fn animate_pose_images(
    video: &VideoModel,
    reference: &Image,
    reference_pose: &Image,
    poses: &[Image],
    seed: u64,
) -> Result<Vec<Image>> {
    let f = video.config.frames_per_clip;
    let chunks: Vec<Vec<Image>> = poses
        .par_chunks(f)
        .enumerate()
        .map(|(i, c)| generate_clip(video, reference, reference_pose, c, chunk_seed(seed, i), true))
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Intermediate and final products of one inference run.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub mesh: MeshSequence,
    pub pose: PoseSequence,
    pub landmarks: LandmarkSequence,
    pub pose_images: Vec<Image>,
    pub frames: Vec<Image>,
}

/// Loads a reference image and checks it matches the model resolution.
pub fn load_reference(path: &Path, size: usize) -> Result<Image> {
    let img = Image::load_png(path)?;
    if img.width() != size || img.height() != size {
        return Err(Error::InvalidArgument(format!(
            "reference image {} is {}×{}, expected {size}×{size}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(img)
}

/// Landmark image of the reference: the first frame of `landmarks` if
/// given, otherwise the neutral face at the rest pose.
pub fn reference_pose_image(cfg: &PipelineConfig, landmarks: Option<&LandmarkSequence>) -> Result<Image> {
    let topology = FaceTopology::desk();
    let frame = match landmarks.and_then(|l| l.frames.first()) {
        Some(f) => f.clone(),
        None => {
            let cam = cfg.camera.intrinsics(cfg.render.image_size)?;
            project(&crate::geometry::apply_pose(&topology.canonical_mesh(), &cfg.camera.rest_pose()), &cam)?
        }
    };
    render_pose_image(&frame, &topology, &cfg.render)
}

/// Runs the full pipeline on in-memory inputs.
pub fn run_pipeline(
    models: &Models,
    cfg: &PipelineConfig,
    wave: &crate::audio::Waveform,
    reference: &Image,
    reference_pose: &Image,
    seed: u64,
) -> Result<InferOutput> {
    let backbone = LogMelBackbone::new(cfg.audio_frontend.clone())?;
    let fps = cfg.audio_frontend.fps;
    let feats = backbone.extract(wave, fps).map_err(|e| e.in_stage("audio_frontend"))?;
    let mesh = mesh_forward(&models.mesh, &feats).map_err(|e| e.in_stage("audio2mesh"))?;
    let pose = decode_autoregressive(&models.pose, &feats, None)
        .and_then(|p| absolute_from_rest(&p, &cfg.camera.rest_pose()))
        .map_err(|e| e.in_stage("audio2pose"))?;
    let cam = cfg.camera.intrinsics(cfg.render.image_size)?;
    let landmarks = project_sequence(&mesh, &pose, &cam).map_err(|e| e.in_stage("project"))?;
    let pose_images =
        render_sequence(&landmarks, &FaceTopology::desk(), &cfg.render).map_err(|e| e.in_stage("pose_render"))?;
    let frames = animate_pose_images(&models.video, reference, reference_pose, &pose_images, seed)
        .map_err(|e| e.in_stage("lmk2video"))?;
    Ok(InferOutput {
        mesh,
        pose,
        landmarks,
        pose_images,
        frames,
    })
}

pub fn write_images(images: &[Image], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    images
        .par_iter()
        .enumerate()
        .try_for_each(|(i, img)| img.save_png(dir.join(frame_name(i))))
}

/// Writes `mesh.json`, `pose.json`, `landmarks.json`, `poses/` and `frames/`.
pub fn write_output(out: &InferOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.mesh.write(dir.join("mesh.json"))?;
    out.pose.write(dir.join("pose.json"))?;
    out.landmarks.write(dir.join("landmarks.json"))?;
    write_images(&out.pose_images, &dir.join("poses"))?;
    write_images(&out.frames, &dir.join("frames"))
}

/// File inputs of [`infer_end_to_end`].
#[derive(Clone, Debug)]
pub struct InferInputs {
    pub audio: PathBuf,
    pub reference_image: PathBuf,
    pub reference_landmarks: Option<PathBuf>,
}

/// Loads checkpoints from `cfg.paths.ckpt_dir`, runs the pipeline and writes
/// everything under `out_dir`. Returns the number of frames written.
pub fn infer_end_to_end(inputs: &InferInputs, cfg: &PipelineConfig, seed: u64, out_dir: &Path) -> Result<usize> {
    let models = Models::load(cfg)?;
    let wave = load_audio(&inputs.audio).map_err(|e| e.in_stage("audio_frontend"))?;
    let reference = load_reference(&inputs.reference_image, cfg.render.image_size)?;
    let ref_lmk = inputs
        .reference_landmarks
        .as_ref()
        .map(LandmarkSequence::read)
        .transpose()?;
    let reference_pose = reference_pose_image(cfg, ref_lmk.as_ref())?;
    let out = run_pipeline(&models, cfg, &wave, &reference, &reference_pose, seed)?;
    write_output(&out, out_dir)?;
    Ok(out.frames.len())
}

/// The diffusion step alone, from a landmark file: renders pose images and
/// animates them exactly as [`infer_end_to_end`] does.
pub fn infer_from_landmarks(
    landmarks: &LandmarkSequence,
    inputs: &InferInputs,
    cfg: &PipelineConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<usize> {
    let video = VideoModel::from_params(load_stage(cfg, "lmk2video")?, &cfg.lmk2video)?;
    let reference = load_reference(&inputs.reference_image, cfg.render.image_size)?;
    let ref_lmk = inputs
        .reference_landmarks
        .as_ref()
        .map(LandmarkSequence::read)
        .transpose()?;
    let reference_pose = reference_pose_image(cfg, ref_lmk.as_ref())?;
    let poses = render_sequence(landmarks, &FaceTopology::desk(), &cfg.render).map_err(|e| e.in_stage("pose_render"))?;
    let frames = animate_pose_images(&video, &reference, &reference_pose, &poses, seed).map_err(|e| e.in_stage("lmk2video"))?;
    write_images(&frames, &out_dir.join("frames"))?;
    Ok(frames.len())
}
