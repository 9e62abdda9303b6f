use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// Sample rate every waveform is brought to on ingestion.
pub const CANONICAL_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite() || s.abs() > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sample {i} = {} outside [-1, 1]",
                samples[i]
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Round-trips the samples through 16-bit PCM, as writing and re-reading a
    /// WAV file would.
    pub fn quantize_pcm16(&self) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|&s| f64::from(to_pcm16(s)) / 32768.0)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

fn to_pcm16(s: f64) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Reads a PCM16 WAV file, downmixes stereo by channel mean and resamples
/// linearly to [`CANONICAL_RATE`].
pub fn load_audio(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.sample_format != SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM, found {:?} {}-bit",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let channels = spec.channels as usize;
    if !(1..=2).contains(&channels) {
        return Err(Error::Format(format!(
            "{}: {channels} channels (only mono or stereo supported)",
            path.display()
        )));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if raw.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no samples", path.display())));
    }
    let mono: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| f64::from(s) / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    let samples = resample_linear(&mono, spec.sample_rate, CANONICAL_RATE);
    Waveform::new(samples, CANONICAL_RATE)
}

/// Linear-interpolation resampling; output length is `⌊n·to/from⌋`.
pub fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to {
        return samples.to_vec();
    }
    let n_out = (samples.len() as u64 * u64::from(to) / u64::from(from)) as usize;
    let ratio = f64::from(from) / f64::from(to);
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            let a = samples[i0.min(samples.len() - 1)];
            let b = samples[(i0 + 1).min(samples.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Writes a mono PCM16 WAV file.
pub fn write_wav_pcm16(path: impl AsRef<Path>, wave: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in &wave.samples {
        writer.write_sample(to_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}
