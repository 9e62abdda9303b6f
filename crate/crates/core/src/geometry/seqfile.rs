//! MeshSeq / PoseSeq / LandmarkSeq version-1 JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FaceMesh, LandmarkFrame, PoseVector};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointSeqFile<const D: usize> {
    version: u32,
    fps: f64,
    n_points: usize,
    #[serde(with = "frames_serde")]
    frames: Vec<Vec<[f64; D]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseSeqFile {
    version: u32,
    fps: f64,
    frames: Vec<[f64; 6]>,
}

// serde cannot derive for const-generic arrays directly inside nested Vecs.
mod frames_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer, const D: usize>(
        frames: &[Vec<[f64; D]>],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let nested: Vec<Vec<&[f64]>> = frames
            .iter()
            .map(|f| f.iter().map(|p| p.as_slice()).collect())
            .collect();
        nested.serialize(s)
    }

    pub fn deserialize<'de, De: Deserializer<'de>, const D: usize>(
        d: De,
    ) -> Result<Vec<Vec<[f64; D]>>, De::Error> {
        let nested: Vec<Vec<Vec<f64>>> = Vec::deserialize(d)?;
        nested
            .into_iter()
            .map(|f| {
                f.into_iter()
                    .map(|p| {
                        <[f64; D]>::try_from(p.as_slice()).map_err(|_| {
                            De::Error::custom(format!("expected {D} coordinates, got {}", p.len()))
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_header(version: u32, fps: f64) -> Result<()> {
    if version != VERSION {
        return Err(Error::Format(format!("unsupported sequence version {version}")));
    }
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::Format(format!("invalid fps {fps}")));
    }
    Ok(())
}

fn check_points<const D: usize>(n_points: usize, frames: &[Vec<[f64; D]>]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        if f.len() != n_points {
            return Err(Error::Format(format!(
                "frame {t} has {} points, header says {n_points}",
                f.len()
            )));
        }
        if !f.iter().flatten().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("frame {t}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeshSequence {
    pub fps: f64,
    pub n_points: usize,
    pub frames: Vec<FaceMesh>,
}

impl MeshSequence {
    /// All frames must have the same vertex count; an empty sequence has `n_points = 0`.
    pub fn new(fps: f64, frames: Vec<FaceMesh>) -> Result<Self> {
        let n_points = frames.first().map_or(0, FaceMesh::len);
        let raw: Vec<Vec<[f64; 3]>> = frames.iter().map(|f| f.vertices.clone()).collect();
        check_points(n_points, &raw)?;
        Ok(Self {
            fps,
            n_points,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f: PointSeqFile<3> = read_json(path.as_ref())?;
        check_header(f.version, f.fps)?;
        check_points(f.n_points, &f.frames)?;
        Ok(Self {
            fps: f.fps,
            n_points: f.n_points,
            frames: f.frames.into_iter().map(|vertices| FaceMesh { vertices }).collect(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &PointSeqFile::<3> {
                version: VERSION,
                fps: self.fps,
                n_points: self.n_points,
                frames: self.frames.iter().map(|m| m.vertices.clone()).collect(),
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub fps: f64,
    pub poses: Vec<PoseVector>,
}

impl PoseSequence {
    /// Validates every pose (finite, rotation angle below π).
    pub fn new(fps: f64, poses: Vec<PoseVector>) -> Result<Self> {
        for (frame, p) in poses.iter().enumerate() {
            p.validate()
                .map_err(|reason| Error::InvalidPose { frame, reason })?;
        }
        Ok(Self { fps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f: PoseSeqFile = read_json(path.as_ref())?;
        check_header(f.version, f.fps)?;
        Self::new(f.fps, f.frames.into_iter().map(PoseVector::from_array).collect())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &PoseSeqFile {
                version: VERSION,
                fps: self.fps,
                frames: self.poses.iter().map(|p| p.to_array()).collect(),
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSequence {
    pub fps: f64,
    pub n_points: usize,
    pub frames: Vec<LandmarkFrame>,
}

impl LandmarkSequence {
    pub fn new(fps: f64, frames: Vec<LandmarkFrame>) -> Result<Self> {
        let n_points = frames.first().map_or(0, LandmarkFrame::len);
        let raw: Vec<Vec<[f64; 2]>> = frames.iter().map(|f| f.points.clone()).collect();
        check_points(n_points, &raw)?;
        Ok(Self {
            fps,
            n_points,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let f: PointSeqFile<2> = read_json(path.as_ref())?;
        check_header(f.version, f.fps)?;
        check_points(f.n_points, &f.frames)?;
        Ok(Self {
            fps: f.fps,
            n_points: f.n_points,
            frames: f.frames.into_iter().map(|points| LandmarkFrame { points }).collect(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(
            path.as_ref(),
            &PointSeqFile::<2> {
                version: VERSION,
                fps: self.fps,
                n_points: self.n_points,
                frames: self.frames.iter().map(|f| f.points.clone()).collect(),
            },
        )
    }
}
