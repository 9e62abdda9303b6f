//! Configuration, checkpoints, the synthetic corpus and end-to-end inference.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod infer;
pub mod synth;

pub use checkpoint::{load_checkpoint, load_subtree, save_checkpoint};
pub use config::PipelineConfig;
pub use infer::{infer_end_to_end, infer_from_landmarks, InferInputs, Models};
pub use synth::{generate_synthetic_dataset, SyntheticDataset};
