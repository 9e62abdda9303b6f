use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_pose, FaceMesh, LandmarkFrame, LandmarkSequence, MeshSequence, PoseSequence};

/// Pinhole camera. Image `u` grows right and `v` grows down.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub z_near: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, z_near: f64) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            z_near,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// `fx = fy = focal_scale·size`, principal point at the image centre.
    pub fn for_image(image_size: usize, focal_scale: f64) -> Self {
        let s = image_size as f64;
        Self {
            fx: focal_scale * s,
            fy: focal_scale * s,
            cx: s / 2.0,
            cy: s / 2.0,
            z_near: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.z_near]
            .iter()
            .all(|x| x.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.z_near <= 0.0 {
            return Err(Error::InvalidArgument(format!("invalid camera {self:?}")));
        }
        Ok(())
    }
}

/// `u = fx·x/z + cx`, `v = fy·y/z + cy`. Vertices closer than `z_near` are an error.
pub fn project(mesh_cam: &FaceMesh, cam: &CameraIntrinsics) -> Result<LandmarkFrame> {
    let points = mesh_cam
        .vertices
        .iter()
        .enumerate()
        .map(|(i, &[x, y, z])| {
            if !(z >= cam.z_near) {
                return Err(Error::BehindCamera {
                    frame: None,
                    vertex: i,
                    z,
                    z_near: cam.z_near,
                });
            }
            Ok([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        })
        .collect::<Result<_>>()?;
    Ok(LandmarkFrame { points })
}

/// Frame `t` is `project(apply_pose(meshes[t], poses[t]), cam)`.
pub fn project_sequence(
    meshes: &MeshSequence,
    poses: &PoseSequence,
    cam: &CameraIntrinsics,
) -> Result<LandmarkSequence> {
    if meshes.frames.len() != poses.poses.len() {
        return Err(Error::LengthMismatch {
            left: meshes.frames.len(),
            right: poses.poses.len(),
        });
    }
    let frames = meshes
        .frames
        .iter()
        .zip(&poses.poses)
        .enumerate()
        .map(|(t, (m, p))| project(&apply_pose(m, p), cam).map_err(|e| e.at_frame(t)))
        .collect::<Result<_>>()?;
    Ok(LandmarkSequence {
        fps: meshes.fps,
        n_points: meshes.n_points,
        frames,
    })
}
