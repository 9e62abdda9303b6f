use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{Waveform, CANONICAL_RATE};
use crate::error::{Error, Result};
use crate::learning::Tensor;

/// Per-video-frame speech features, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSequence {
    pub frames: Tensor,
    pub fps: f64,
    pub backbone_id: String,
}

impl AudioFeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.dim();
        &self.frames.data()[t * d..(t + 1) * d]
    }
}

/// Anything that turns a canonical waveform into frame-aligned features.
///
/// Downstream models depend only on this contract, so a pretrained speech
/// encoder can replace the filterbank without other changes.
pub trait AudioBackbone {
    fn id(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn extract(&self, wave: &Waveform, fps: f64) -> Result<AudioFeatureSequence>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub floor: f64,
    pub fps: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 26,
            win_ms: 25.0,
            floor: 1e-8,
            fps: 25.0,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || !(self.win_ms > 0.0) || !(self.floor > 0.0) || !(self.fps > 0.0) {
            return Err(Error::Config(format!("invalid audio_frontend {self:?}")));
        }
        Ok(())
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (f64::from(sample_rate) / self.fps).round() as usize
    }
}

/// Log-mel filterbank energies: a deterministic stand-in for a pretrained
/// speech encoder.
#[derive(Clone, Debug)]
pub struct LogMelBackbone {
    pub config: FrontendConfig,
}

impl LogMelBackbone {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale between 0 Hz and Nyquist,
/// as a `n_mels × (n_fft/2 + 1)` weight table.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

impl AudioBackbone for LogMelBackbone {
    fn id(&self) -> String {
        format!("logmel{}", self.config.n_mels)
    }

    fn feature_dim(&self) -> usize {
        self.config.n_mels
    }

    fn extract(&self, wave: &Waveform, fps: f64) -> Result<AudioFeatureSequence> {
        if wave.sample_rate() != CANONICAL_RATE {
            return Err(Error::InvalidArgument(format!(
                "waveform must be at {CANONICAL_RATE} Hz, got {}",
                wave.sample_rate()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::InvalidArgument(format!("fps must be positive, got {fps}")));
        }
        let cfg = &self.config;
        let sr = f64::from(wave.sample_rate());
        let hop = (sr / fps).round() as usize;
        let win = ((cfg.win_ms * sr / 1000.0).round() as usize).max(1);
        let n_frames = if hop == 0 { 0 } else { wave.len() / hop };
        if n_frames == 0 {
            return Err(Error::EmptyInput(format!(
                "{} samples is shorter than one hop of {hop}",
                wave.len()
            )));
        }
        let n_fft = win.next_power_of_two();
        let window: Vec<f64> = if win == 1 {
            vec![1.0]
        } else {
            (0..win)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (win - 1) as f64).cos())
                .collect()
        };
        let bank = mel_filterbank(cfg.n_mels, n_fft, sr);
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
        let samples = wave.samples();

        let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut power = vec![0.0; n_fft / 2 + 1];
        for t in 0..n_frames {
            let start = t * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = if i < win {
                    samples.get(start + i).copied().unwrap_or(0.0) * window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(s, 0.0);
            }
            fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr() / n_fft as f64;
            }
            for filt in &bank {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                out.push((e + cfg.floor).ln());
            }
        }
        Ok(AudioFeatureSequence {
            frames: Tensor::new(&[n_frames, cfg.n_mels], out)?,
            fps,
            backbone_id: self.id(),
        })
    }
}

/// Linearly re-times feature rows produced at `native_rate` rows per second
/// onto `n_frames` video frames at `fps`.
///
/// Adapter seam for encoders whose native frame rate differs from the video
/// rate.
pub fn align_rows_to_fps(native: &Tensor, native_rate: f64, fps: f64, n_frames: usize) -> Result<Tensor> {
    if native.ndim() != 2 || native.shape()[0] == 0 {
        return Err(Error::EmptyInput("no feature rows to align".into()));
    }
    let (rows, d) = (native.shape()[0], native.shape()[1]);
    let mut out = Vec::with_capacity(n_frames * d);
    for t in 0..n_frames {
        let pos = (t as f64 * native_rate / fps).min((rows - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(rows - 1);
        let frac = pos - i0 as f64;
        for c in 0..d {
            let a = native.get(&[i0, c]);
            let b = native.get(&[i1, c]);
            out.push(a + (b - a) * frac);
        }
    }
    Tensor::new(&[n_frames, d], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), CANONICAL_RATE).unwrap()
    }

    fn backbone() -> LogMelBackbone {
        LogMelBackbone::new(FrontendConfig::default()).unwrap()
    }

    #[test]
    fn two_seconds_at_25fps_is_50_frames() {
        let f = backbone().extract(&noise(32_000, 1), 25.0).unwrap();
        assert_eq!(f.len(), 50);
        assert_eq!(f.dim(), 26);
    }

    #[test]
    fn silence_gives_log_floor_everywhere() {
        let w = Waveform::new(vec![0.0; 6400], CANONICAL_RATE).unwrap();
        let f = backbone().extract(&w, 25.0).unwrap();
        let want = (1e-8f64).ln();
        assert!(f.frames.data().iter().all(|&x| x == want));
    }

    #[test]
    fn shorter_than_one_hop_is_empty_input() {
        let err = backbone().extract(&noise(600, 2), 25.0).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn deterministic_and_prefix_aligned() {
        let w = noise(16_000, 3);
        let b = backbone();
        let full = b.extract(&w, 25.0).unwrap();
        assert!(full.frames.bit_eq(&b.extract(&w, 25.0).unwrap().frames));
        for k in [1usize, 7, 19] {
            let part = b.extract(&w.prefix(k * 640), 25.0).unwrap();
            assert_eq!(part.len(), k);
            assert!(part.frames.bit_eq(&full.frames.slice_outer(0, k)));
        }
    }

    #[test]
    fn louder_audio_has_more_energy() {
        let quiet = noise(6400, 4);
        let loud = Waveform::new(quiet.samples().iter().map(|s| s * 2.0).collect(), CANONICAL_RATE).unwrap();
        let b = backbone();
        let fq = b.extract(&quiet, 25.0).unwrap();
        let fl = b.extract(&loud, 25.0).unwrap();
        assert!(fl.frames.sum() > fq.frames.sum());
    }

    #[test]
    fn align_rows_identity_and_halving() {
        let native = Tensor::new(&[4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let same = align_rows_to_fps(&native, 25.0, 25.0, 4).unwrap();
        assert_eq!(same, native);
        let half = align_rows_to_fps(&native, 50.0, 25.0, 2).unwrap();
        assert_eq!(half.data(), &[0.0, 2.0]);
    }
}
