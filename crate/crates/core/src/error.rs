use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("attention mask leaves query row {row} with no visible key")]
    DegenerateMask { row: usize },

    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("vertex {vertex} is behind the camera (z = {z}, z_near = {z_near}){}", frame_suffix(*.frame))]
    BehindCamera {
        frame: Option<usize>,
        vertex: usize,
        z: f64,
        z_near: f64,
    },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid pose at frame {frame}: {reason}")]
    InvalidPose { frame: usize, reason: String },

    #[error("unknown landmark group `{0}`")]
    UnknownGroup(String),

    #[error("topology mismatch: {0}")]
    Topology(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint corrupted at parameter `{param}`: {reason}")]
    Corruption { param: String, reason: String },

    #[error("missing {stage} checkpoint at {}", .path.display())]
    MissingCheckpoint { stage: String, path: PathBuf },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

fn frame_suffix(frame: Option<usize>) -> String {
    match frame {
        Some(f) => format!(" at frame {f}"),
        None => String::new(),
    }
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn at_frame(self, frame: usize) -> Self {
        match self {
            Error::BehindCamera {
                vertex, z, z_near, ..
            } => Error::BehindCamera {
                frame: Some(frame),
                vertex,
                z,
                z_near,
            },
            other => Error::AtFrame {
                frame,
                source: Box::new(other),
            },
        }
    }
}
