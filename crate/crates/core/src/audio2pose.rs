//! Head-pose decoding from audio with a small causal transformer decoder.
//!
//! Pose tokens attend causally to earlier poses and, through
//! cross-attention, to the whole audio sequence. There is no layer
//! normalisation; every sub-layer is a plain residual add.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::AudioFeatureSequence;
use crate::error::{Error, Result};
use crate::geometry::{PoseSequence, PoseVector};
use crate::learning::{sinusoid_embedding, Adam, AdamConfig, Grads, Graph, Initializer, Params, Tensor, Var};
use crate::train::{check_loss, column_stats, normalize, LossHistory, TrainConfig};

pub const PREFIX: &str = "audio2pose";

fn key(name: &str) -> String {
    format!("{PREFIX}.{name}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseDecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_t: usize,
}

impl Default for PoseDecoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            d_ff: 128,
            max_t: 512,
        }
    }
}

impl PoseDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 || self.max_t == 0 {
            return Err(Error::Config(format!("invalid pose decoder config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseDecoder {
    pub params: Params,
    pub config: PoseDecoderConfig,
    pub feature_dim: usize,
    pe: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct PoseDataset {
    pub train: Vec<(AudioFeatureSequence, PoseSequence)>,
    pub val: Vec<(AudioFeatureSequence, PoseSequence)>,
}

/// Standard sinusoidal position table `[max_t, d]`, one
/// [`sinusoid_embedding`] row per position.
pub fn sinusoid_table(max_t: usize, d: usize) -> Tensor {
    let data = (0..max_t).flat_map(|p| sinusoid_embedding(p as f64, d)).collect();
    Tensor::new(&[max_t, d], data).expect("shape")
}

/// Row-major `t×t` table; entry `(i, j)` is allowed iff `j ≤ i`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t * t).map(|k| k % t <= k / t).collect()
}

const ATTN: [&str; 4] = ["q", "k", "v", "o"];

pub fn init_pose_decoder(feature_dim: usize, config: &PoseDecoderConfig, seed: u64) -> Result<PoseDecoder> {
    config.validate()?;
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("feature width must be positive".into()));
    }
    let dm = config.d_model;
    let mut init = Initializer::new(seed);
    init.zeros(key("norm.mean"), &[feature_dim]);
    init.tensor(key("norm.std"), Tensor::ones(&[feature_dim]));
    init.linear(&key("audio_proj"), feature_dim, dm);
    init.linear(&key("pose_embed"), 6, dm);
    init.uniform(key("start"), &[dm], 1.0 / (dm as f64).sqrt());
    for l in 0..config.layers {
        for site in ["self_attn", "cross_attn"] {
            for p in ATTN {
                init.linear(&key(&format!("blocks.{l}.{site}.{p}")), dm, dm);
            }
        }
        init.linear(&key(&format!("blocks.{l}.ff1")), dm, config.d_ff);
        init.linear(&key(&format!("blocks.{l}.ff2")), config.d_ff, dm);
    }
    init.linear_zero(&key("head"), dm, 6);
    PoseDecoder::from_params(init.finish(), config)
}

impl PoseDecoder {
    /// Rebuilds a decoder from stored weights, checking shapes against `config`.
    pub fn from_params(params: Params, config: &PoseDecoderConfig) -> Result<Self> {
        config.validate()?;
        let dm = config.d_model;
        let feature_dim = params.get(&key("norm.mean"))?.numel();
        let mut expect: Vec<(String, Vec<usize>)> = vec![
            (key("norm.std"), vec![feature_dim]),
            (key("audio_proj.weight"), vec![feature_dim, dm]),
            (key("audio_proj.bias"), vec![dm]),
            (key("pose_embed.weight"), vec![6, dm]),
            (key("pose_embed.bias"), vec![dm]),
            (key("start"), vec![dm]),
            (key("head.weight"), vec![dm, 6]),
            (key("head.bias"), vec![6]),
        ];
        for l in 0..config.layers {
            for site in ["self_attn", "cross_attn"] {
                for p in ATTN {
                    let base = key(&format!("blocks.{l}.{site}.{p}"));
                    expect.push((format!("{base}.weight"), vec![dm, dm]));
                    expect.push((format!("{base}.bias"), vec![dm]));
                }
            }
            expect.push((key(&format!("blocks.{l}.ff1.weight")), vec![dm, config.d_ff]));
            expect.push((key(&format!("blocks.{l}.ff1.bias")), vec![config.d_ff]));
            expect.push((key(&format!("blocks.{l}.ff2.weight")), vec![config.d_ff, dm]));
            expect.push((key(&format!("blocks.{l}.ff2.bias")), vec![dm]));
        }
        for (name, shape) in &expect {
            let got = params.get(name)?.shape();
            if got != shape.as_slice() {
                return Err(Error::dim(format!("`{name}` has shape {got:?}, want {shape:?}")));
            }
        }
        Ok(Self {
            params: params.subtree(&format!("{PREFIX}.")),
            config: config.clone(),
            feature_dim,
            pe: sinusoid_table(config.max_t, dm),
        })
    }

    pub fn position_table(&self) -> &Tensor {
        &self.pe
    }

    fn positions(&self, batch: usize, t: usize) -> Tensor {
        let dm = self.config.d_model;
        let rows = &self.pe.data()[..t * dm];
        Tensor::new(&[batch, t, dm], rows.repeat(batch)).expect("shape")
    }

    fn check_lengths(&self, audio_t: usize, t: usize) -> Result<()> {
        let max = self.config.max_t;
        if t > max || audio_t > max {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} frames exceeds max_t = {max}",
                t.max(audio_t)
            )));
        }
        if t == 0 {
            return Err(Error::EmptyInput("pose decoding needs at least one frame".into()));
        }
        Ok(())
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        params: &Params,
        base: &str,
        x: Var,
        memory: Var,
        mask: Option<Arc<Vec<bool>>>,
    ) -> Result<Var> {
        let lin = |g: &mut Graph, p: &str, input: Var| -> Result<Var> {
            let w = g.param(params, &format!("{base}.{p}.weight"))?;
            let b = g.param(params, &format!("{base}.{p}.bias"))?;
            g.linear(input, w, Some(b))
        };
        let q = lin(g, "q", x)?;
        let k = lin(g, "k", memory)?;
        let v = lin(g, "v", memory)?;
        let a = g.attention(q, k, v, self.config.heads, mask)?;
        let o = lin(g, "o", a)?;
        g.add(x, o)
    }

    /// Predictions `[B, T, 6]` for raw audio `[B, Ta, D]` and previous poses
    /// `[B, T−1, 6]`. Token 0 is the learned start token, or `first` embedded
    /// as a pose when given.
    fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        audio: &Tensor,
        prev: &Tensor,
        first: Option<[f64; 6]>,
    ) -> Result<Var> {
        let (b, ta) = (audio.shape()[0], audio.shape()[1]);
        let t = prev.shape()[1] + 1;
        self.check_lengths(ta, t)?;
        let dm = self.config.d_model;

        let a = g.constant(normalize(params, PREFIX, audio)?);
        let wa = g.param(params, &key("audio_proj.weight"))?;
        let ba = g.param(params, &key("audio_proj.bias"))?;
        let a = g.linear(a, wa, Some(ba))?;
        let pe_a = g.constant(self.positions(b, ta));
        let memory = g.add(a, pe_a)?;

        let we = g.param(params, &key("pose_embed.weight"))?;
        let be = g.param(params, &key("pose_embed.bias"))?;
        let head_token = match first {
            Some(p) => {
                let p = g.constant(Tensor::new(&[1, 1, 6], p.to_vec())?);
                g.linear(p, we, Some(be))?
            }
            None => {
                let s = g.param(params, &key("start"))?;
                g.reshape(s, &[1, 1, dm])?
            }
        };
        let head_token = g.select_outer(head_token, &vec![0; b])?;
        let mut x = if t > 1 {
            let p = g.constant(prev.clone());
            let e = g.linear(p, we, Some(be))?;
            g.concat(&[head_token, e], 1)?
        } else {
            head_token
        };
        let pe_x = g.constant(self.positions(b, t));
        x = g.add(x, pe_x)?;

        let mask = Arc::new(causal_mask(t));
        for l in 0..self.config.layers {
            x = self.attention_block(g, params, &key(&format!("blocks.{l}.self_attn")), x, x, Some(mask.clone()))?;
            x = self.attention_block(g, params, &key(&format!("blocks.{l}.cross_attn")), x, memory, None)?;
            let w1 = g.param(params, &key(&format!("blocks.{l}.ff1.weight")))?;
            let b1 = g.param(params, &key(&format!("blocks.{l}.ff1.bias")))?;
            let w2 = g.param(params, &key(&format!("blocks.{l}.ff2.weight")))?;
            let b2 = g.param(params, &key(&format!("blocks.{l}.ff2.bias")))?;
            let h = g.linear(x, w1, Some(b1))?;
            let h = g.relu(h);
            let h = g.linear(h, w2, Some(b2))?;
            x = g.add(x, h)?;
        }
        let wh = g.param(params, &key("head.weight"))?;
        let bh = g.param(params, &key("head.bias"))?;
        g.linear(x, wh, Some(bh))
    }

    fn check_audio(&self, audio: &AudioFeatureSequence) -> Result<()> {
        if audio.dim() != self.feature_dim {
            return Err(Error::dim(format!(
                "audio features have width {}, pose decoder expects {}",
                audio.dim(),
                self.feature_dim
            )));
        }
        Ok(())
    }
}

fn pose_rows(poses: &[PoseVector]) -> Vec<f64> {
    poses.iter().flat_map(|p| p.to_array()).collect()
}

fn batched(t: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.clone().reshape(&shape).expect("same size")
}

/// `Σ weights ⊙ y` for the teacher-forced outputs `y [B, T, 6]` of audio
/// `[B, Ta, D]` and previous poses `[B, T−1, 6]`, with parameter gradients.
pub fn decoder_objective(
    model: &PoseDecoder,
    params: &Params,
    audio: &Tensor,
    prev: &Tensor,
    weights: &Tensor,
) -> Result<(f64, Grads)> {
    let mut g = Graph::new();
    let y = model.forward(&mut g, params, audio, prev, None)?;
    let s = g.weighted_sum(y, weights)?;
    Ok((g.value(s).data()[0], g.backward(s)?.into_param_grads(params)))
}

/// Predicted `[T, 6]` poses where input token `t` is the ground-truth pose
/// `t − 1`.
pub fn decode_teacher_forced(
    model: &PoseDecoder,
    audio: &AudioFeatureSequence,
    gt: &PoseSequence,
) -> Result<Tensor> {
    model.check_audio(audio)?;
    if audio.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: audio.len(),
            right: gt.len(),
        });
    }
    let t = gt.len();
    model.check_lengths(audio.len(), t)?;
    let prev = Tensor::new(&[1, t - 1, 6], pose_rows(&gt.poses[..t - 1]))?;
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &model.params, &batched(&audio.frames), &prev, None)?;
    g.value(out).clone().reshape(&[t, 6])
}

/// Autoregressive predictions `[T, 6]` before rotation canonicalisation.
/// Each step reruns the decoder on the full prefix of its own outputs.
pub fn decode_autoregressive_raw(
    model: &PoseDecoder,
    audio: &AudioFeatureSequence,
    seed_pose: Option<PoseVector>,
) -> Result<Tensor> {
    model.check_audio(audio)?;
    let t_total = audio.len();
    model.check_lengths(t_total, t_total)?;
    let a = batched(&audio.frames);
    let first = seed_pose.map(|p| p.to_array());
    let mut out: Vec<f64> = Vec::with_capacity(t_total * 6);
    for t in 0..t_total {
        let prev = Tensor::new(&[1, t, 6], out.clone())?;
        let mut g = Graph::inference();
        let y = model.forward(&mut g, &model.params, &a, &prev, first)?;
        out.extend_from_slice(&g.value(y).data()[t * 6..(t + 1) * 6]);
    }
    Tensor::new(&[t_total, 6], out)
}

/// Autoregressive pose track, one pose per audio frame. `seed_pose`, when
/// given, replaces the learned start token with an embedded pose.
pub fn decode_autoregressive(
    model: &PoseDecoder,
    audio: &AudioFeatureSequence,
    seed_pose: Option<PoseVector>,
) -> Result<PoseSequence> {
    let raw = decode_autoregressive_raw(model, audio, seed_pose)?;
    let poses = raw
        .data()
        .chunks(6)
        .map(|r| PoseVector::try_from(r).map(|p| p.canonicalized()))
        .collect::<Result<Vec<_>>>()?;
    PoseSequence::new(audio.fps, poses)
}

fn check_pairs(pairs: &[(AudioFeatureSequence, PoseSequence)], model: &PoseDecoder) -> Result<()> {
    for (a, p) in pairs {
        model.check_audio(a)?;
        if a.len() != p.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: p.len(),
            });
        }
        model.check_lengths(a.len(), p.len())?;
    }
    Ok(())
}

/// Teacher-forced L1 loss of `[B, T, *]` windows.
fn window_loss(model: &PoseDecoder, params: &Params, audio: &Tensor, target: &Tensor) -> Result<(f64, Grads)> {
    let (b, t) = (target.shape()[0], target.shape()[1]);
    let mut prev = Vec::with_capacity(b * (t - 1) * 6);
    for row in target.data().chunks(t * 6) {
        prev.extend_from_slice(&row[..(t - 1) * 6]);
    }
    let prev = Tensor::new(&[b, t - 1, 6], prev)?;
    let mut g = Graph::new();
    let pred = model.forward(&mut g, params, audio, &prev, None)?;
    let y = g.constant(target.clone());
    let loss = g.l1(pred, y)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)?.into_param_grads(params)))
}

fn val_l1(model: &PoseDecoder, pairs: &[(AudioFeatureSequence, PoseSequence)]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, p) in pairs {
        let pred = decode_teacher_forced(model, a, p)?;
        total += pred
            .data()
            .iter()
            .zip(pose_rows(&p.poses))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>();
        count += pred.numel();
    }
    Ok(total / count.max(1) as f64)
}

/// Teacher-forced L1 training with Adam. Each step draws `batch` clips and
/// crops them to a common window (the shortest drawn clip) at random offsets.
pub fn train_audio2pose(
    model: PoseDecoder,
    data: &PoseDataset,
    cfg: &TrainConfig,
) -> Result<(PoseDecoder, LossHistory)> {
    cfg.validate()?;
    let clips: Vec<_> = data.train.iter().filter(|(a, _)| !a.is_empty()).cloned().collect();
    if clips.is_empty() {
        return Err(Error::EmptyInput("audio2pose training set has no frames".into()));
    }
    check_pairs(&clips, &model)?;
    check_pairs(&data.val, &model)?;
    let val = if data.val.is_empty() { &clips } else { &data.val };

    let mut model = model;
    let all_audio = Tensor::cat_outer(&clips.iter().map(|c| c.0.frames.clone()).collect::<Vec<_>>())?;
    let (mean, std) = column_stats(&all_audio);
    model.params.insert(key("norm.mean"), mean);
    model.params.insert(key("norm.std"), std);

    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut cursor = order.len();
    let d = model.feature_dim;
    let mut history = LossHistory::default();
    for step in 0..cfg.steps {
        if history.wants_val(step, cfg) {
            let v = val_l1(&model, val)?;
            check_loss(step, v)?;
            history.val.push((step, v));
        }
        let mut pick = Vec::with_capacity(cfg.batch);
        while pick.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            pick.push(order[cursor]);
            cursor += 1;
        }
        let w = pick.iter().map(|&i| clips[i].0.len()).min().expect("batch > 0");
        let mut audio = Vec::with_capacity(pick.len() * w * d);
        let mut target = Vec::with_capacity(pick.len() * w * 6);
        for &i in &pick {
            let (a, p) = &clips[i];
            let off = rng.gen_range(0..=a.len() - w);
            audio.extend_from_slice(&a.frames.data()[off * d..(off + w) * d]);
            target.extend(pose_rows(&p.poses[off..off + w]));
        }
        let audio = Tensor::new(&[pick.len(), w, d], audio)?;
        let target = Tensor::new(&[pick.len(), w, 6], target)?;
        let (loss, grads) = window_loss(&model, &model.params, &audio, &target)?;
        check_loss(step, loss)?;
        history.train.push(loss);
        adam.step(&mut model.params, &grads, |n| !n.contains(".norm."))?;
        model.params.round_to_f32();
        log::debug!("audio2pose step {step}: train L1 {loss:.6}");
    }
    let v = val_l1(&model, val)?;
    check_loss(cfg.steps, v)?;
    if history.val.last().map(|p| p.0) != Some(cfg.steps) {
        history.val.push((cfg.steps, v));
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::gradcheck;

    fn audio(t: usize, d: usize, seed: u64) -> AudioFeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioFeatureSequence {
            frames: Tensor::new(&[t, d], (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
            fps: 25.0,
            backbone_id: "test".into(),
        }
    }

    fn poses(t: usize, seed: u64) -> PoseSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (0..t)
            .map(|_| {
                let mut a = [0.0; 6];
                a.iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
                PoseVector::from_array(a)
            })
            .collect();
        PoseSequence::new(25.0, p).unwrap()
    }

    fn small() -> PoseDecoderConfig {
        PoseDecoderConfig {
            d_model: 8,
            layers: 2,
            heads: 2,
            d_ff: 12,
            max_t: 32,
        }
    }

    /// Decoder with a random (non-zero) output head.
    fn live_decoder(seed: u64) -> PoseDecoder {
        let mut m = init_pose_decoder(5, &small(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mut w = Tensor::uniform(&[8, 6], 0.4, &mut rng);
        w.round_to_f32();
        m.params.insert(key("head.weight"), w);
        m
    }

    #[test]
    fn mask_patterns() {
        assert_eq!(causal_mask(1), vec![true]);
        let m = causal_mask(3);
        assert_eq!(m.iter().filter(|&&a| a).count(), 6);
        assert_eq!(m, vec![true, false, false, true, true, false, true, true, true]);
        let m = causal_mask(5);
        assert!(m[20..25].iter().all(|&a| a));
    }

    #[test]
    fn position_row_zero_alternates() {
        let m = init_pose_decoder(4, &PoseDecoderConfig::default(), 0).unwrap();
        let pe = m.position_table();
        assert_eq!(pe.shape(), &[512, 64]);
        for c in 0..64 {
            assert_eq!(pe.get(&[0, c]), if c % 2 == 0 { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn init_contract() {
        let cfg = PoseDecoderConfig::default();
        let a = init_pose_decoder(26, &cfg, 1).unwrap();
        assert!(a.params.get("audio2pose.head.weight").unwrap().data().iter().all(|&w| w == 0.0));
        assert!(a.params.bit_eq(&init_pose_decoder(26, &cfg, 1).unwrap().params));
        let bad = PoseDecoderConfig {
            heads: 3,
            ..cfg
        };
        assert!(init_pose_decoder(26, &bad, 1).is_err());
    }

    #[test]
    fn zero_head_predicts_zero() {
        let m = init_pose_decoder(5, &small(), 3).unwrap();
        let a = audio(10, 5, 1);
        let tf = decode_teacher_forced(&m, &a, &poses(10, 2)).unwrap();
        assert!(tf.data().iter().all(|&x| x == 0.0));
        let ar = decode_autoregressive(&m, &a, None).unwrap();
        assert_eq!(ar.len(), 10);
        assert!(ar.poses.iter().all(|p| p.to_array() == [0.0; 6]));
    }

    #[test]
    fn teacher_forcing_is_causal() {
        let m = live_decoder(4);
        let a = audio(9, 5, 5);
        let gt = poses(9, 6);
        let base = decode_teacher_forced(&m, &a, &gt).unwrap();
        for k in [0usize, 4, 8] {
            let mut pert = gt.clone();
            pert.poses[k].translation[1] += 0.5;
            let out = decode_teacher_forced(&m, &a, &pert).unwrap();
            assert!(out.slice_outer(0, k + 1).bit_eq(&base.slice_outer(0, k + 1)));
            if k + 1 < 9 {
                assert!(!out.slice_outer(k + 1, 9).bit_eq(&base.slice_outer(k + 1, 9)));
            }
        }
    }

    #[test]
    fn autoregressive_output_replays_under_teacher_forcing() {
        let m = live_decoder(7);
        let a = audio(12, 5, 8);
        let raw = decode_autoregressive_raw(&m, &a, None).unwrap();
        let seq = PoseSequence::new(
            25.0,
            raw.data().chunks(6).map(|r| PoseVector::try_from(r).unwrap()).collect(),
        )
        .unwrap();
        let tf = decode_teacher_forced(&m, &a, &seq).unwrap();
        assert!(tf.bit_eq(&raw));
        let ar = decode_autoregressive(&m, &a, None).unwrap();
        assert_eq!(ar.len(), 12);
        assert!(decode_autoregressive_raw(&m, &a, None).unwrap().bit_eq(&raw));
    }

    #[test]
    fn length_limits() {
        let m = init_pose_decoder(5, &small(), 0).unwrap();
        assert!(decode_autoregressive(&m, &audio(33, 5, 0), None).is_err());
        assert!(matches!(
            decode_teacher_forced(&m, &audio(4, 5, 0), &poses(3, 0)),
            Err(Error::LengthMismatch { .. })
        ));
    }

    fn linear_ref(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        (0..dout)
            .map(|j| b.data()[j] + (0..din).map(|i| x[i] * w.get(&[i, j])).sum::<f64>())
            .collect()
    }

    fn attend_ref(q: &[f64], keys: &[Vec<f64>], vals: &[Vec<f64>]) -> Vec<f64> {
        let scale = 1.0 / (q.len() as f64).sqrt();
        let s: Vec<f64> = keys.iter().map(|k| scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()).collect();
        let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        (0..vals[0].len())
            .map(|c| e.iter().zip(vals).map(|(w, v)| w / z * v[c]).sum())
            .collect()
    }

    #[test]
    fn tiny_decoder_matches_hand_evaluation() {
        let cfg = PoseDecoderConfig {
            d_model: 2,
            layers: 1,
            heads: 1,
            d_ff: 2,
            max_t: 4,
        };
        let mut m = init_pose_decoder(1, &cfg, 0).unwrap();
        let t2 = |v: [f64; 4]| Tensor::new(&[2, 2], v.to_vec()).unwrap();
        let set = |m: &mut PoseDecoder, n: &str, t: Tensor| m.params.insert(key(n), t);
        set(&mut m, "audio_proj.weight", Tensor::new(&[1, 2], vec![1.0, -0.5]).unwrap());
        set(&mut m, "start", Tensor::new(&[2], vec![0.25, -0.75]).unwrap());
        let mut pe_w = Tensor::zeros(&[6, 2]);
        pe_w.set(&[0, 0], 1.0);
        pe_w.set(&[5, 1], 2.0);
        set(&mut m, "pose_embed.weight", pe_w);
        set(&mut m, "blocks.0.self_attn.q.weight", t2([1.0, 0.0, 0.0, 1.0]));
        set(&mut m, "blocks.0.self_attn.k.weight", t2([0.5, 0.5, -0.5, 1.0]));
        set(&mut m, "blocks.0.self_attn.v.weight", t2([1.0, 2.0, 0.0, -1.0]));
        set(&mut m, "blocks.0.self_attn.o.weight", t2([0.5, 0.0, 0.0, 0.5]));
        set(&mut m, "blocks.0.cross_attn.q.weight", t2([0.0, 1.0, 1.0, 0.0]));
        set(&mut m, "blocks.0.cross_attn.k.weight", t2([1.0, 0.0, 0.0, 1.0]));
        set(&mut m, "blocks.0.cross_attn.v.weight", t2([1.0, 0.0, 0.0, 1.0]));
        set(&mut m, "blocks.0.cross_attn.o.weight", t2([1.0, 1.0, 0.0, 1.0]));
        set(&mut m, "blocks.0.ff1.weight", t2([1.0, -1.0, 0.5, 1.0]));
        set(&mut m, "blocks.0.ff2.weight", t2([0.25, 0.0, 0.0, -0.25]));
        let mut head = Tensor::zeros(&[2, 6]);
        head.set(&[0, 0], 1.0);
        head.set(&[1, 5], 1.0);
        set(&mut m, "head.weight", head);

        let a = AudioFeatureSequence {
            frames: Tensor::new(&[2, 1], vec![0.5, -1.0]).unwrap(),
            fps: 25.0,
            backbone_id: "x".into(),
        };
        let gt = PoseSequence::new(
            25.0,
            vec![
                PoseVector::from_array([0.2, 0.0, 0.0, 0.0, 0.0, 0.1]),
                PoseVector::from_array([0.0; 6]),
            ],
        )
        .unwrap();
        let got = decode_teacher_forced(&m, &a, &gt).unwrap();

        // Hand evaluation with the biases all zero.
        let p = |name: &str| m.params.get(&key(name)).unwrap().clone();
        let z2 = Tensor::zeros(&[2]);
        let pe = [[0.0, 1.0], [1f64.sin(), 1f64.cos()]];
        let mem: Vec<Vec<f64>> = (0..2)
            .map(|t| {
                let f = a.frames.get(&[t, 0]);
                vec![f + pe[t][0], -0.5 * f + pe[t][1]]
            })
            .collect();
        let mut x = vec![
            vec![0.25 + pe[0][0], -0.75 + pe[0][1]],
            vec![0.2 + pe[1][0], 2.0 * 0.1 + pe[1][1]],
        ];
        let sa = |n: &str| p(&format!("blocks.0.self_attn.{n}.weight"));
        let ca = |n: &str| p(&format!("blocks.0.cross_attn.{n}.weight"));
        let ks: Vec<_> = x.iter().map(|r| linear_ref(r, &sa("k"), &z2)).collect();
        let vs: Vec<_> = x.iter().map(|r| linear_ref(r, &sa("v"), &z2)).collect();
        let mut y = Vec::new();
        for t in 0..2 {
            let q = linear_ref(&x[t], &sa("q"), &z2);
            let o = linear_ref(&attend_ref(&q, &ks[..=t], &vs[..=t]), &sa("o"), &z2);
            y.push(vec![x[t][0] + o[0], x[t][1] + o[1]]);
        }
        x = y;
        let ks: Vec<_> = mem.iter().map(|r| linear_ref(r, &ca("k"), &z2)).collect();
        let vs: Vec<_> = mem.iter().map(|r| linear_ref(r, &ca("v"), &z2)).collect();
        for row in x.iter_mut() {
            let q = linear_ref(row, &ca("q"), &z2);
            let o = linear_ref(&attend_ref(&q, &ks, &vs), &ca("o"), &z2);
            row[0] += o[0];
            row[1] += o[1];
        }
        for (t, row) in x.iter().enumerate() {
            let h: Vec<f64> = linear_ref(row, &p("blocks.0.ff1.weight"), &z2).into_iter().map(|v| v.max(0.0)).collect();
            let f = linear_ref(&h, &p("blocks.0.ff2.weight"), &z2);
            let out = [row[0] + f[0], row[1] + f[1]];
            assert!((got.get(&[t, 0]) - out[0]).abs() < 1e-12);
            assert!((got.get(&[t, 5]) - out[1]).abs() < 1e-12);
            for c in 1..5 {
                assert_eq!(got.get(&[t, c]), 0.0);
            }
        }
    }

    #[test]
    fn decoder_block_gradient_matches_finite_differences() {
        let cfg = PoseDecoderConfig {
            d_model: 4,
            layers: 1,
            heads: 2,
            d_ff: 6,
            max_t: 8,
        };
        let mut m = init_pose_decoder(3, &cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        m.params.insert(key("head.weight"), Tensor::uniform(&[4, 6], 0.5, &mut rng));
        let audio = Tensor::uniform(&[2, 4, 3], 1.0, &mut rng);
        let prev = Tensor::uniform(&[2, 2, 6], 0.5, &mut rng);
        let probe = Tensor::uniform(&[2, 3, 6], 1.0, &mut rng);
        let f = |p: &Params| -> Result<(f64, Grads)> {
            let mut g = Graph::new();
            let y = m.forward(&mut g, p, &audio, &prev, None)?;
            let s = g.weighted_sum(y, &probe)?;
            Ok((g.value(s).data()[0], g.backward(s)?.into_param_grads(p)))
        };
        let report = gradcheck(f, &m.params, 1e-6, None).unwrap();
        assert!(report.checked > 200);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn zero_targets_give_zero_loss_and_training_is_deterministic() {
        let zeros = PoseSequence::new(25.0, vec![PoseVector::from_array([0.0; 6]); 10]).unwrap();
        let data = PoseDataset {
            train: vec![(audio(10, 5, 1), zeros.clone()), (audio(10, 5, 2), zeros.clone())],
            val: vec![(audio(10, 5, 3), zeros)],
        };
        let cfg = TrainConfig {
            lr: 1e-3,
            steps: 10,
            batch: 2,
            val_every: 5,
            seed: 3,
        };
        let (_, h) = train_audio2pose(init_pose_decoder(5, &small(), 0).unwrap(), &data, &cfg).unwrap();
        assert!(h.train.iter().all(|&l| l == 0.0));
        assert!(h.val.iter().all(|v| v.1 == 0.0));

        let sine = |phase: f64| {
            let p = (0..10)
                .map(|t| PoseVector::from_array([0.0, 0.2 * (0.5 * t as f64 + phase).sin(), 0.0, 0.0, 0.0, 0.0]))
                .collect();
            PoseSequence::new(25.0, p).unwrap()
        };
        let data = PoseDataset {
            train: vec![(audio(10, 5, 1), sine(0.0)), (audio(12, 5, 2), {
                let mut s = sine(1.0);
                s.poses.extend(sine(2.0).poses[..2].iter().copied());
                s
            })],
            val: vec![],
        };
        let cfg = TrainConfig {
            steps: 40,
            ..cfg
        };
        let run = || train_audio2pose(init_pose_decoder(5, &small(), 0).unwrap(), &data, &cfg).unwrap();
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert!(m1.params.bit_eq(&m2.params));
        assert!(h1.final_val().unwrap() < h1.initial_val().unwrap());
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let m = init_pose_decoder(5, &small(), 0).unwrap();
        assert!(train_audio2pose(m, &PoseDataset::default(), &TrainConfig::default()).is_err());
    }
}
