//! Two-stage training of the video generator and clip generation.
//!
//! Stage 1 trains the per-frame parts (backbone, reference network, pose
//! guider) on single frames with the motion module switched off. Stage 2
//! freezes them and trains only the motion module on whole clips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::learning::{Adam, AdamConfig, Grads, Graph, Params, Tensor};
use crate::lmk2video::codec::{decode_latent, encode_latent, pose_tensor};
use crate::lmk2video::nets::{BackboneInputs, Conditioning, DenoiseOptions, LatentClip, VideoModel, MOTION_PREFIX};
use crate::lmk2video::schedule::{ddim_sample, NoiseSchedule};
use crate::render::Image;
use crate::train::{check_loss, LossHistory, TrainConfig};

pub type StageHistory = LossHistory;

/// One training clip: a reference frame with its landmark image, and
/// consecutive target frames with their landmark images.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub reference: Image,
    pub reference_pose: Image,
    pub frames: Vec<Image>,
    pub poses: Vec<Image>,
}

#[derive(Clone, Debug, Default)]
pub struct VideoDataset {
    pub train: Vec<VideoClip>,
    pub val: Vec<VideoClip>,
}

/// A clip converted to model inputs.
#[derive(Clone, Debug)]
pub struct EncodedClip {
    pub ref_latent: Tensor,
    pub ref_pose: Tensor,
    pub latents: Vec<Tensor>,
    pub poses: Vec<Tensor>,
}

impl EncodedClip {
    /// `frames` may be empty when only the conditioning is needed.
    pub fn encode(clip: &VideoClip, model: &VideoModel) -> Result<Self> {
        let cfg = &model.config;
        if !clip.frames.is_empty() && clip.frames.len() != clip.poses.len() {
            return Err(Error::LengthMismatch {
                left: clip.frames.len(),
                right: clip.poses.len(),
            });
        }
        let sized = |img: &Image| -> Result<()> {
            if img.width() != cfg.image_size || img.height() != cfg.image_size {
                return Err(Error::dim(format!(
                    "{}×{} image, model expects {}×{}",
                    img.width(),
                    img.height(),
                    cfg.image_size,
                    cfg.image_size
                )));
            }
            Ok(())
        };
        for img in std::iter::once(&clip.reference)
            .chain(std::iter::once(&clip.reference_pose))
            .chain(&clip.frames)
            .chain(&clip.poses)
        {
            sized(img)?;
        }
        Ok(Self {
            ref_latent: encode_latent(&clip.reference, cfg.latent_factor)?,
            ref_pose: pose_tensor(&clip.reference_pose),
            latents: clip
                .frames
                .iter()
                .map(|f| encode_latent(f, cfg.latent_factor))
                .collect::<Result<_>>()?,
            poses: clip.poses.iter().map(pose_tensor).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// A minibatch of `clips × frames` noisy samples with fixed `t` and noise.
struct Batch {
    x0: Tensor,
    ref_latent: Tensor,
    poses: Tensor,
    ref_pose: Tensor,
    frames: usize,
    t: Vec<usize>,
    eps: Tensor,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Builds a batch from `(clip, first frame)` windows of `frames` frames. Each
/// window gets one timestep; every frame gets its own noise.
fn make_batch(
    clips: &[EncodedClip],
    windows: &[(usize, usize)],
    frames: usize,
    t_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut x0 = Vec::new();
    let mut poses = Vec::new();
    let mut refs = Vec::new();
    let mut ref_poses = Vec::new();
    let mut t = Vec::new();
    for &(c, start) in windows {
        let clip = &clips[c];
        let tc = rng.gen_range(0..t_steps);
        for f in start..start + frames {
            x0.push(&clip.latents[f]);
            poses.push(&clip.poses[f]);
            t.push(tc);
        }
        refs.push(&clip.ref_latent);
        ref_poses.push(&clip.ref_pose);
    }
    let x0 = stack(&x0)?;
    let eps: Vec<f64> = (0..x0.numel()).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Batch {
        eps: Tensor::new(x0.shape(), eps)?,
        x0,
        ref_latent: stack(&refs)?,
        poses: stack(&poses)?,
        ref_pose: stack(&ref_poses)?,
        frames,
        t,
    })
}

/// Noise-prediction MSE of a batch, with parameter gradients when `grads`.
fn batch_loss(
    model: &VideoModel,
    params: &Params,
    schedule: &NoiseSchedule,
    batch: &Batch,
    motion: bool,
    grads: bool,
) -> Result<(f64, Option<Grads>)> {
    let n = batch.t.len();
    let per = batch.x0.numel() / n;
    let mut xt = vec![0.0; batch.x0.numel()];
    for (i, &t) in batch.t.iter().enumerate() {
        let (a, s) = schedule.coefficients(t)?;
        let r = i * per..(i + 1) * per;
        for ((o, x), e) in xt[r.clone()].iter_mut().zip(&batch.x0.data()[r.clone()]).zip(&batch.eps.data()[r]) {
            *o = a * x + s * e;
        }
    }
    let mut g = if grads { Graph::new() } else { Graph::inference() };
    let x = g.constant(Tensor::new(batch.x0.shape(), xt)?);
    let rl = g.constant(batch.ref_latent.clone());
    let pv = g.constant(batch.poses.clone());
    let rp = g.constant(batch.ref_pose.clone());
    let reference = model.refnet_graph(&mut g, params, rl)?;
    let clip_of = VideoModel::clip_index(n, batch.frames);
    let guidance = model.guider_graph(&mut g, params, pv, rp, &clip_of)?;
    let pred = model.backbone_graph(
        &mut g,
        params,
        BackboneInputs {
            x,
            t: &batch.t,
            frames: batch.frames,
            reference: Some(reference),
            guidance: Some(guidance),
            motion,
        },
    )?;
    let target = g.constant(batch.eps.clone());
    let loss = g.mse(pred, target)?;
    let value = g.value(loss).data()[0];
    let grads = if grads {
        Some(g.backward(loss)?.into_param_grads(params))
    } else {
        None
    };
    Ok((value, grads))
}

fn encode_all(clips: &[VideoClip], model: &VideoModel) -> Result<Vec<EncodedClip>> {
    clips.iter().map(|c| EncodedClip::encode(c, model)).collect()
}

/// Random windows of `frames` frames from clips long enough to hold one.
fn draw_windows(clips: &[EncodedClip], count: usize, frames: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let usable: Vec<usize> = (0..clips.len()).filter(|&i| clips[i].len() >= frames).collect();
    (0..count)
        .map(|_| {
            let c = usable[rng.gen_range(0..usable.len())];
            (c, rng.gen_range(0..=clips[c].len() - frames))
        })
        .collect()
}

/// Latents encode pixels into `[-1, 1]`; sampling clamps predictions to it.
pub const LATENT_RANGE: f64 = 1.0;

const VAL_SEED_SALT: u64 = 0x5eed_0f_7a1d;
const VAL_CHUNK: usize = 16;

fn run_stage(
    model: VideoModel,
    data: &VideoDataset,
    cfg: &TrainConfig,
    stage: u8,
) -> Result<(VideoModel, StageHistory)> {
    cfg.validate()?;
    let frames = if stage == 1 { 1 } else { model.config.frames_per_clip };
    let train = encode_all(&data.train, &model)?;
    if !train.iter().any(|c| c.len() >= frames) {
        return Err(Error::EmptyInput(format!(
            "stage {stage} needs a training clip of at least {frames} frames"
        )));
    }
    let val = if data.val.is_empty() {
        train.clone()
    } else {
        encode_all(&data.val, &model)?
    };
    if !val.iter().any(|c| c.len() >= frames) {
        return Err(Error::EmptyInput(format!(
            "stage {stage} needs a validation clip of at least {frames} frames"
        )));
    }
    let schedule = model.config.schedule()?;
    let t_steps = model.config.t_steps;
    let motion = stage == 2;

    // Held-out batches are drawn once so every evaluation sees the same t and noise.
    let mut vrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VAL_SEED_SALT);
    let n_val_windows = if stage == 1 { 4 * VAL_CHUNK } else { 2 * val.len().max(2) };
    let per_chunk = (VAL_CHUNK / frames).max(1);
    let val_windows = draw_windows(&val, n_val_windows, frames, &mut vrng);
    let val_batches: Vec<Batch> = val_windows
        .chunks(per_chunk)
        .map(|w| make_batch(&val, w, frames, t_steps, &mut vrng))
        .collect::<Result<_>>()?;
    let val_loss = |m: &VideoModel| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for b in &val_batches {
            let (l, _) = batch_loss(m, &m.params, &schedule, b, motion, false)?;
            total += l * b.t.len() as f64;
            count += b.t.len();
        }
        Ok(total / count as f64)
    };

    let trainable = move |name: &str| name.starts_with(MOTION_PREFIX) == motion;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: model.config.weight_decay,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = model;
    let mut history = StageHistory::default();
    let clips_per_step = (cfg.batch / frames).max(1);
    for step in 0..cfg.steps {
        if history.wants_val(step, cfg) {
            let v = val_loss(&model)?;
            check_loss(step, v)?;
            history.val.push((step, v));
        }
        let windows = draw_windows(&train, clips_per_step, frames, &mut rng);
        let batch = make_batch(&train, &windows, frames, t_steps, &mut rng)?;
        let (loss, grads) = batch_loss(&model, &model.params, &schedule, &batch, motion, true)?;
        check_loss(step, loss)?;
        history.train.push(loss);
        adam.step(&mut model.params, &grads.expect("recorded"), trainable)?;
        model.params.round_to_f32();
        log::debug!("lmk2video stage {stage} step {step}: loss {loss:.6}");
    }
    let v = val_loss(&model)?;
    check_loss(cfg.steps, v)?;
    if history.val.last().map(|p| p.0) != Some(cfg.steps) {
        history.val.push((cfg.steps, v));
    }
    Ok((model, history))
}

/// Noise-prediction loss of the model on `windows` random windows of
/// `frames` frames drawn from `clips` with `seed`, with or without the motion
/// module. The same arguments always produce the same batch.
pub fn evaluate_loss(
    model: &VideoModel,
    clips: &[VideoClip],
    frames: usize,
    windows: usize,
    seed: u64,
    motion: bool,
) -> Result<f64> {
    let encoded = encode_all(clips, model)?;
    if frames == 0 || windows == 0 || !encoded.iter().any(|c| c.len() >= frames) {
        return Err(Error::EmptyInput(format!("no clip holds a window of {frames} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = draw_windows(&encoded, windows, frames, &mut rng);
    let batch = make_batch(&encoded, &w, frames, model.config.t_steps, &mut rng)?;
    Ok(batch_loss(model, &model.params, &model.config.schedule()?, &batch, motion, false)?.0)
}

/// Per-frame noise-prediction training of everything except the motion
/// module, which is left bit-identical. `cfg.batch` frames per step.
pub fn train_stage1(model: VideoModel, data: &VideoDataset, cfg: &TrainConfig) -> Result<(VideoModel, StageHistory)> {
    run_stage(model, data, cfg, 1)
}

/// Clip-level training of the motion module only; every other parameter
/// is left bit-identical. Each step uses `cfg.batch / frames_per_clip`
/// clips (at least one).
pub fn train_stage2(model: VideoModel, data: &VideoDataset, cfg: &TrainConfig) -> Result<(VideoModel, StageHistory)> {
    run_stage(model, data, cfg, 2)
}

/// Samples latents for one clip by DDIM, conditioned on a reference image,
/// its landmark image and one landmark image per output frame.
pub fn generate_latents(
    model: &VideoModel,
    reference: &Image,
    reference_pose: &Image,
    poses: &[Image],
    seed: u64,
    motion: bool,
) -> Result<LatentClip> {
    let cfg = &model.config;
    if poses.is_empty() {
        return Err(Error::EmptyInput("no pose images to animate".into()));
    }
    let clip = EncodedClip::encode(
        &VideoClip {
            reference: reference.clone(),
            reference_pose: reference_pose.clone(),
            frames: vec![],
            poses: poses.to_vec(),
        },
        model,
    )?;
    let cond = Conditioning {
        reference: Some(model.reference_features(&clip.ref_latent)?),
        guidance: Some(model.pose_guidance(&stack(&clip.poses.iter().collect::<Vec<_>>())?, &clip.ref_pose)?),
    };
    let schedule = cfg.schedule()?;
    let shape = [poses.len(), cfg.latent_channels(), cfg.latent_size(), cfg.latent_size()];
    let opts = DenoiseOptions { motion };
    let z = ddim_sample(&shape, cfg.ddim_steps, &schedule, seed, Some(LATENT_RANGE), |x, t| model.denoise(x, t, &cond, opts))?;
    LatentClip::new(z)
}

/// [`generate_latents`] decoded to images.
pub fn generate_clip(
    model: &VideoModel,
    reference: &Image,
    reference_pose: &Image,
    poses: &[Image],
    seed: u64,
    motion: bool,
) -> Result<Vec<Image>> {
    let z = generate_latents(model, reference, reference_pose, poses, seed, motion)?;
    (0..z.frames())
        .map(|f| decode_latent(&z.frame(f), model.config.latent_factor))
        .collect()
}

/// Mean absolute latent difference between adjacent generated frames,
/// averaged over the first `frames_per_clip` frames of each clip. Clip `i`
/// is sampled with seed `seed + i`.
pub fn temporal_proxy(model: &VideoModel, clips: &[VideoClip], seed: u64, motion: bool) -> Result<f64> {
    let f = model.config.frames_per_clip;
    let scores: Vec<f64> = clips
        .par_iter()
        .enumerate()
        .filter(|(_, c)| c.poses.len() >= 2)
        .map(|(i, c)| {
            let n = f.min(c.poses.len());
            let z = generate_latents(model, &c.reference, &c.reference_pose, &c.poses[..n], seed + i as u64, motion)?;
            let per = z.latents.numel() / n;
            let d = z.latents.data();
            let total: f64 = (1..n)
                .map(|k| {
                    (0..per)
                        .map(|j| (d[k * per + j] - d[(k - 1) * per + j]).abs())
                        .sum::<f64>()
                })
                .sum();
            Ok(total / ((n - 1) * per) as f64)
        })
        .collect::<Result<_>>()?;
    if scores.is_empty() {
        return Err(Error::EmptyInput("temporal proxy needs clips of at least 2 frames".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}
