pub mod audio;
pub mod audio2mesh;
pub mod audio2pose;
pub mod error;
pub mod geometry;
pub mod learning;
pub mod lmk2video;
pub mod pipeline;
pub mod reenact;
pub mod render;
pub mod train;

pub use error::{Error, Result};
