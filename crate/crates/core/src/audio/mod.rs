//! Speech ingestion and per-video-frame feature extraction.

mod features;
mod wav;

pub use features::{
    align_rows_to_fps, AudioBackbone, AudioFeatureSequence, FrontendConfig, LogMelBackbone,
};
pub use wav::{load_audio, resample_linear, write_wav_pcm16, Waveform, CANONICAL_RATE};
