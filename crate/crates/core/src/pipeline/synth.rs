//! Procedural talking-face corpus with a known audio → face mapping.
//!
//! Each clip gets its own identity (card and background colours), a noise
//! burst soundtrack, a mesh track whose lower lip drops with frame loudness
//! and whose brows rise with low-band loudness, a slow yaw/pitch head sway,
//! projected landmarks, pose images and ground-truth frames.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::audio::{load_audio, write_wav_pcm16, AudioBackbone, Waveform, CANONICAL_RATE};
use crate::audio2mesh::MeshDataset;
use crate::audio2pose::PoseDataset;
use crate::error::{Error, Result};
use crate::geometry::{
    apply_pose, project, FaceMesh, FaceTopology, LandmarkFrame, LandmarkSequence, MeshSequence, PoseSequence, PoseVector,
};
use crate::lmk2video::{VideoClip, VideoDataset};
use crate::render::{render_pose_image, Image, RenderStyle, Rgb};

pub const DATASET_FILE: &str = "dataset.json";
const LOW_BAND_HZ: f64 = 300.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub version: u32,
    pub seed: u64,
    pub fps: f64,
    pub image_size: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// One generated clip, fully in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub wave: Waveform,
    pub mesh: MeshSequence,
    pub pose: PoseSequence,
    pub landmarks: LandmarkSequence,
    pub frames: Vec<Image>,
    pub poses: Vec<Image>,
    pub reference: Image,
    pub reference_pose: Image,
    pub reference_landmarks: LandmarkSequence,
}

impl SynthClip {
    pub fn video_clip(&self) -> VideoClip {
        VideoClip {
            reference: self.reference.clone(),
            reference_pose: self.reference_pose.clone(),
            frames: self.frames.clone(),
            poses: self.poses.clone(),
        }
    }
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// One-pole low-pass with cutoff `hz`.
fn low_pass(x: &[f64], hz: f64, rate: f64) -> Vec<f64> {
    let a = (-2.0 * PI * hz / rate).exp();
    let mut y = 0.0;
    x.iter()
        .map(|&v| {
            y = a * y + (1.0 - a) * v;
            y
        })
        .collect()
}

/// Piecewise-constant on/off envelope with short linear ramps.
fn burst_envelope(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Vec<f64> {
    let mut env = Vec::with_capacity(n);
    let mut level: f64 = 0.0;
    while env.len() < n {
        let len = (rng.gen_range(0.08..0.35) * rate) as usize;
        let target = if rng.gen_bool(0.6) { rng.gen_range(0.3..1.0) } else { 0.0 };
        let ramp = (0.01 * rate) as usize;
        for i in 0..len.max(1) {
            let w = (i as f64 / ramp as f64).min(1.0);
            env.push(level + (target - level) * w);
        }
        level = target;
    }
    env.truncate(n);
    env
}

/// Band-limited noise bursts: a low band and a mid band with independent envelopes.
fn synth_audio(rng: &mut ChaCha8Rng, n: usize) -> Waveform {
    let rate = f64::from(CANONICAL_RATE);
    let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let low = low_pass(&white, 250.0, rate);
    let wide = low_pass(&white, 3000.0, rate);
    let floor = low_pass(&wide, 400.0, rate);
    let env_low = burst_envelope(rng, n, rate);
    let env_mid = burst_envelope(rng, n, rate);
    let samples = (0..n)
        .map(|i| (1.2 * env_low[i] * low[i] + 0.6 * env_mid[i] * (wide[i] - floor[i])).clamp(-1.0, 1.0))
        .collect();
    Waveform::new(samples, CANONICAL_RATE)
        .expect("finite samples")
        .quantize_pcm16()
}

fn window_rms(x: &[f64], start: usize, win: usize) -> f64 {
    let end = (start + win).min(x.len());
    if end <= start {
        return 0.0;
    }
    (x[start..end].iter().map(|v| v * v).sum::<f64>() / (end - start) as f64).sqrt()
}

/// Per-frame `(RMS, low-band RMS)` over the same window the audio front end uses.
pub fn frame_loudness(wave: &Waveform, cfg: &PipelineConfig) -> Vec<(f64, f64)> {
    let fe = &cfg.audio_frontend;
    let rate = f64::from(wave.sample_rate());
    let hop = fe.hop(wave.sample_rate());
    let win = ((fe.win_ms * rate / 1000.0).round() as usize).max(1);
    let n_frames = if hop == 0 { 0 } else { wave.len() / hop };
    let low = low_pass(wave.samples(), LOW_BAND_HZ, rate);
    (0..n_frames)
        .map(|t| (window_rms(wave.samples(), t * hop, win), window_rms(&low, t * hop, win)))
        .collect()
}

/// Lower-lip drop for every frame: `lip_gain · RMS`.
pub fn lip_offsets(wave: &Waveform, cfg: &PipelineConfig) -> Vec<f64> {
    frame_loudness(wave, cfg)
        .into_iter()
        .map(|(rms, _)| cfg.dataset.lip_gain * rms)
        .collect()
}

/// Mesh track driven by the waveform. Lower-lip vertices move down (`+y`)
/// by the lip offset and brow vertices move up by `brow_gain · low-band RMS`.
pub fn mesh_track(wave: &Waveform, topology: &FaceTopology, cfg: &PipelineConfig) -> Result<MeshSequence> {
    let base = topology.canonical_mesh();
    let lips = topology.group("lower_lip")?.indices();
    let brows: Vec<usize> = ["right_brow", "left_brow"]
        .iter()
        .map(|g| topology.group(g).map(|g| g.indices()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let frames = frame_loudness(wave, cfg)
        .into_iter()
        .map(|(rms, low)| {
            let mut m = base.clone();
            let lip = cfg.dataset.lip_gain * rms;
            let brow = cfg.dataset.brow_gain * low;
            for i in lips.clone() {
                m.vertices[i][1] += lip;
            }
            for &i in &brows {
                m.vertices[i][1] -= brow;
            }
            m
        })
        .collect();
    MeshSequence::new(cfg.audio_frontend.fps, frames)
}

fn pose_track(rng: &mut ChaCha8Rng, n: usize, cfg: &PipelineConfig) -> Result<PoseSequence> {
    let fps = cfg.audio_frontend.fps;
    let (fy, fp) = (rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8));
    let (py, pp) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let d = &cfg.dataset;
    let poses = (0..n)
        .map(|t| {
            let s = t as f64 / fps;
            PoseVector {
                rotation: [
                    d.pitch_amplitude * (2.0 * PI * fp * s + pp).sin(),
                    d.yaw_amplitude * (2.0 * PI * fy * s + py).sin(),
                    0.0,
                ],
                translation: cfg.camera.rest_translation,
            }
        })
        .collect();
    PoseSequence::new(fps, poses)
}

struct Identity {
    background: Rgb,
    face: Rgb,
}

fn identity(rng: &mut ChaCha8Rng) -> Identity {
    Identity {
        background: [0; 3].map(|_: u8| rng.gen_range(10..70)),
        face: [0; 3].map(|_: u8| rng.gen_range(90..200)),
    }
}

/// Flat-colour elliptical face card under the landmark drawing.
fn compose_frame(lmk: &LandmarkFrame, pose_image: &Image, id: &Identity, style: &RenderStyle) -> Image {
    let s = style.image_size;
    let mut img = Image::filled(s, s, id.background);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &lmk.points {
        for c in 0..2 {
            lo[c] = lo[c].min(p[c]);
            hi[c] = hi[c].max(p[c]);
        }
    }
    let (cx, cy) = ((lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0);
    let (rx, ry) = (0.6 * (hi[0] - lo[0]).max(1.0), 0.6 * (hi[1] - lo[1]).max(1.0));
    for y in 0..s {
        for x in 0..s {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                img.put(x, y, id.face);
            }
        }
    }
    for y in 0..s {
        for x in 0..s {
            let p = pose_image.get(x, y);
            if p != style.background {
                img.put(x, y, p);
            }
        }
    }
    img
}

/// Generates clip `index` of the corpus for `seed`.
pub fn synthesize_clip(cfg: &PipelineConfig, seed: u64, index: usize) -> Result<SynthClip> {
    let topology = FaceTopology::desk();
    let mut rng = clip_rng(seed, index);
    let id = identity(&mut rng);
    let fps = cfg.audio_frontend.fps;
    let n_frames = (cfg.dataset.seconds * fps).floor() as usize;
    let hop = cfg.audio_frontend.hop(CANONICAL_RATE);
    if n_frames == 0 {
        return Err(Error::Config("dataset.seconds is shorter than one frame".into()));
    }
    let wave = synth_audio(&mut rng, n_frames * hop);
    let mesh = mesh_track(&wave, &topology, cfg)?;
    let pose = pose_track(&mut rng, n_frames, cfg)?;
    let cam = cfg.camera.intrinsics(cfg.render.image_size)?;
    let project_one = |m: &FaceMesh, p: &PoseVector| project(&apply_pose(m, p), &cam);
    let landmarks = LandmarkSequence::new(
        fps,
        mesh.frames
            .iter()
            .zip(&pose.poses)
            .map(|(m, p)| project_one(m, p))
            .collect::<Result<_>>()?,
    )?;
    let style = &cfg.render;
    let poses = landmarks
        .frames
        .iter()
        .map(|l| render_pose_image(l, &topology, style))
        .collect::<Result<Vec<_>>>()?;
    let frames = landmarks
        .frames
        .iter()
        .zip(&poses)
        .map(|(l, p)| compose_frame(l, p, &id, style))
        .collect();
    let ref_lmk = project_one(&topology.canonical_mesh(), &cfg.camera.rest_pose())?;
    let reference_pose = render_pose_image(&ref_lmk, &topology, style)?;
    let reference = compose_frame(&ref_lmk, &reference_pose, &id, style);
    Ok(SynthClip {
        wave,
        mesh,
        pose,
        landmarks,
        frames,
        poses,
        reference,
        reference_pose,
        reference_landmarks: LandmarkSequence::new(fps, vec![ref_lmk])?,
    })
}

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:03}")
}

pub fn frame_name(index: usize) -> String {
    format!("{index:04}.png")
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes one clip: `audio.wav`, `mesh.json`, `pose.json`, `landmarks.json`,
/// `reference.png`, `reference_pose.png`, `reference_landmarks.json`,
/// `frames/NNNN.png` and `poses/NNNN.png`.
pub fn write_clip(clip: &SynthClip, dir: &Path) -> Result<()> {
    mkdir(&dir.join("frames"))?;
    mkdir(&dir.join("poses"))?;
    write_wav_pcm16(dir.join("audio.wav"), &clip.wave)?;
    clip.mesh.write(dir.join("mesh.json"))?;
    clip.pose.write(dir.join("pose.json"))?;
    clip.landmarks.write(dir.join("landmarks.json"))?;
    clip.reference_landmarks.write(dir.join("reference_landmarks.json"))?;
    clip.reference.save_png(dir.join("reference.png"))?;
    clip.reference_pose.save_png(dir.join("reference_pose.png"))?;
    for (i, (f, p)) in clip.frames.iter().zip(&clip.poses).enumerate() {
        f.save_png(dir.join("frames").join(frame_name(i)))?;
        p.save_png(dir.join("poses").join(frame_name(i)))?;
    }
    Ok(())
}

/// Generates the whole corpus under `dir`; the last `val_clips` clips are the
/// validation split.
pub fn generate_synthetic_dataset(cfg: &PipelineConfig, seed: u64, dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    cfg.validate()?;
    let dir = dir.as_ref();
    mkdir(dir)?;
    let d = &cfg.dataset;
    let names: Vec<String> = (0..d.clips).map(clip_name).collect();
    for (i, name) in names.iter().enumerate() {
        let clip = synthesize_clip(cfg, seed, i)?;
        write_clip(&clip, &dir.join(name))?;
        log::info!("wrote {name} ({} frames)", clip.frames.len());
    }
    let n_train = d.clips - d.val_clips;
    let index = DatasetIndex {
        version: 1,
        seed,
        fps: cfg.audio_frontend.fps,
        image_size: cfg.render.image_size,
        train: names[..n_train].to_vec(),
        val: names[n_train..].to_vec(),
    };
    let path = dir.join(DATASET_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(path, e))?;
    Ok(index)
}

fn load_frames(dir: &Path, n: usize) -> Result<Vec<Image>> {
    (0..n).map(|i| Image::load_png(dir.join(frame_name(i)))).collect()
}

/// Reads one clip written by [`write_clip`].
pub fn load_clip(dir: &Path) -> Result<SynthClip> {
    let mesh = MeshSequence::read(dir.join("mesh.json"))?;
    let pose = PoseSequence::read(dir.join("pose.json"))?;
    let landmarks = LandmarkSequence::read(dir.join("landmarks.json"))?;
    let n = landmarks.len();
    if mesh.len() != n || pose.len() != n {
        return Err(Error::LengthMismatch {
            left: mesh.len(),
            right: pose.len().min(n),
        });
    }
    Ok(SynthClip {
        wave: load_audio(dir.join("audio.wav"))?,
        mesh,
        pose,
        landmarks,
        frames: load_frames(&dir.join("frames"), n)?,
        poses: load_frames(&dir.join("poses"), n)?,
        reference: Image::load_png(dir.join("reference.png"))?,
        reference_pose: Image::load_png(dir.join("reference_pose.png"))?,
        reference_landmarks: LandmarkSequence::read(dir.join("reference_landmarks.json"))?,
    })
}

/// A generated corpus loaded back into memory.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub index: DatasetIndex,
    pub train: Vec<SynthClip>,
    pub val: Vec<SynthClip>,
}

impl SyntheticDataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(DATASET_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: DatasetIndex = serde_json::from_str(&text)?;
        let load = |names: &[String]| names.iter().map(|n| load_clip(&dir.join(n))).collect::<Result<Vec<_>>>();
        Ok(Self {
            train: load(&index.train)?,
            val: load(&index.val)?,
            index,
        })
    }

    /// Builds the corpus in memory without touching the file system.
    pub fn generate(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.dataset;
        let n_train = d.clips - d.val_clips;
        let clips = (0..d.clips)
            .map(|i| synthesize_clip(cfg, seed, i))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = (0..d.clips).map(clip_name).collect();
        let mut train = clips;
        let val = train.split_off(n_train);
        Ok(Self {
            index: DatasetIndex {
                version: 1,
                seed,
                fps: cfg.audio_frontend.fps,
                image_size: cfg.render.image_size,
                train: names[..n_train].to_vec(),
                val: names[n_train..].to_vec(),
            },
            train,
            val,
        })
    }

    pub fn mesh_dataset(&self, backbone: &dyn AudioBackbone) -> Result<MeshDataset> {
        let fps = self.index.fps;
        let pair = |c: &SynthClip| -> Result<_> { Ok((backbone.extract(&c.wave, fps)?, c.mesh.clone())) };
        Ok(MeshDataset {
            train: self.train.iter().map(pair).collect::<Result<_>>()?,
            val: self.val.iter().map(pair).collect::<Result<_>>()?,
        })
    }

    /// Pose targets are expressed relative to `rest`.
    pub fn pose_dataset(&self, backbone: &dyn AudioBackbone, rest: &PoseVector) -> Result<PoseDataset> {
        let fps = self.index.fps;
        let pair = |c: &SynthClip| -> Result<_> { Ok((backbone.extract(&c.wave, fps)?, relative_to_rest(&c.pose, rest)?)) };
        Ok(PoseDataset {
            train: self.train.iter().map(pair).collect::<Result<_>>()?,
            val: self.val.iter().map(pair).collect::<Result<_>>()?,
        })
    }

    pub fn video_dataset(&self) -> VideoDataset {
        VideoDataset {
            train: self.train.iter().map(SynthClip::video_clip).collect(),
            val: self.val.iter().map(SynthClip::video_clip).collect(),
        }
    }
}

/// Subtracts the rest translation from every pose.
pub fn relative_to_rest(poses: &PoseSequence, rest: &PoseVector) -> Result<PoseSequence> {
    shift(poses, rest, -1.0)
}

/// Adds the rest translation back to every pose.
pub fn absolute_from_rest(poses: &PoseSequence, rest: &PoseVector) -> Result<PoseSequence> {
    shift(poses, rest, 1.0)
}

fn shift(poses: &PoseSequence, rest: &PoseVector, sign: f64) -> Result<PoseSequence> {
    let out = poses
        .poses
        .iter()
        .map(|p| {
            let mut q = *p;
            for c in 0..3 {
                q.translation[c] += sign * rest.translation[c];
            }
            q
        })
        .collect();
    PoseSequence::new(poses.fps, out)
}

/// Every file under `dir` with its contents, sorted by relative path.
pub fn tree_contents(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                out.push((path.strip_prefix(dir).expect("under dir").to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> PipelineConfig {
        let mut cfg = PipelineConfig::desk();
        cfg.render.image_size = 32;
        cfg.lmk2video.image_size = 32;
        cfg.dataset.clips = 2;
        cfg.dataset.val_clips = 1;
        cfg.dataset.seconds = 0.4;
        cfg
    }

    #[test]
    fn silent_audio_leaves_mouth_closed() {
        let cfg = small_cfg();
        let wave = Waveform::new(vec![0.0; 6400], CANONICAL_RATE).unwrap();
        assert!(lip_offsets(&wave, &cfg).iter().all(|&o| o == 0.0));
        let topo = FaceTopology::desk();
        let mesh = mesh_track(&wave, &topo, &cfg).unwrap();
        assert_eq!(mesh.len(), 10);
        assert!(mesh.frames.iter().all(|m| *m == topo.canonical_mesh()));
    }

    #[test]
    fn lip_gain_scales_offsets() {
        let mut cfg = small_cfg();
        let a = synthesize_clip(&cfg, 3, 0).unwrap();
        cfg.dataset.lip_gain *= 2.0;
        let b = synthesize_clip(&cfg, 3, 0).unwrap();
        assert_eq!(a.wave, b.wave);
        let base = FaceTopology::desk().canonical_mesh();
        let lips = FaceTopology::desk().group("lower_lip").unwrap().indices();
        let mut moved = false;
        for (ma, mb) in a.mesh.frames.iter().zip(&b.mesh.frames) {
            for i in lips.clone() {
                let (da, db) = (ma.vertices[i][1] - base.vertices[i][1], mb.vertices[i][1] - base.vertices[i][1]);
                assert!((db - 2.0 * da).abs() <= 1e-12, "{da} {db}");
                moved |= da > 1e-3;
            }
        }
        assert!(moved);
        let (oa, ob) = (lip_offsets(&a.wave, &small_cfg()), lip_offsets(&b.wave, &cfg));
        assert!(oa.iter().zip(&ob).all(|(x, y)| *y == 2.0 * x));
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = small_cfg();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_synthetic_dataset(&cfg, 5, d1.path()).unwrap();
        generate_synthetic_dataset(&cfg, 5, d2.path()).unwrap();
        let (t1, t2) = (tree_contents(d1.path()).unwrap(), tree_contents(d2.path()).unwrap());
        assert!(t1.len() > 20);
        assert_eq!(t1, t2);
        let d3 = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&cfg, 6, d3.path()).unwrap();
        assert_ne!(t1, tree_contents(d3.path()).unwrap());
    }

    #[test]
    fn load_matches_generate() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        generate_synthetic_dataset(&cfg, 1, dir.path()).unwrap();
        let loaded = SyntheticDataset::load(dir.path()).unwrap();
        let mem = SyntheticDataset::generate(&cfg, 1).unwrap();
        assert_eq!(loaded.train, mem.train);
        assert_eq!(loaded.val, mem.val);
        assert_eq!(loaded.train[0].frames.len(), 10);
    }

    #[test]
    fn frames_contain_pose_drawing_and_card() {
        let clip = synthesize_clip(&small_cfg(), 0, 0).unwrap();
        let lip_blue = clip.frames[0].pixels().filter(|p| *p == [0, 0, 255]).count();
        assert!(lip_blue > 0);
        let distinct: std::collections::BTreeSet<_> = clip.reference.pixels().collect();
        assert!(distinct.len() >= 4);
    }

    #[test]
    fn rest_shift_round_trips() {
        let clip = synthesize_clip(&small_cfg(), 0, 1).unwrap();
        let rest = small_cfg().camera.rest_pose();
        let rel = relative_to_rest(&clip.pose, &rest).unwrap();
        assert!(rel.poses.iter().all(|p| p.translation == [0.0; 3]));
        assert_eq!(absolute_from_rest(&rel, &rest).unwrap(), clip.pose);
    }
}
