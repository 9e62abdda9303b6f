//! Identity retargeting and expression or pose track editing on 3D meshes.

use crate::error::{Error, Result};
use crate::geometry::{FaceMesh, FaceTopology, MeshSequence, PoseSequence};

fn check_points(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Topology(format!("{what} has {got} vertices, expected {want}")));
    }
    Ok(())
}

/// Moves a mesh sequence onto another identity: frame `t` becomes
/// `tgt_template + (src[t] - src_template)`.
///
/// For `f32`-representable inputs of comparable magnitude every step is
/// exact in `f64`, so retargeting back with the templates swapped returns
/// the source bit for bit.
pub fn retarget_mesh_sequence(src: &MeshSequence, src_template: &FaceMesh, tgt_template: &FaceMesh) -> Result<MeshSequence> {
    let n = src_template.len();
    check_points("target template", tgt_template.len(), n)?;
    let mut frames = Vec::with_capacity(src.len());
    for (t, frame) in src.frames.iter().enumerate() {
        check_points(&format!("source frame {t}"), frame.len(), n)?;
        let vertices = frame
            .vertices
            .iter()
            .zip(&src_template.vertices)
            .zip(&tgt_template.vertices)
            .map(|((v, s), g)| [g[0] + (v[0] - s[0]), g[1] + (v[1] - s[1]), g[2] + (v[2] - s[2])])
            .collect();
        frames.push(FaceMesh { vertices });
    }
    MeshSequence::new(src.fps, frames)
}

/// Scales the deviation of one landmark group from the template by `factor`;
/// every other vertex is copied unchanged.
pub fn scale_expression(
    meshes: &MeshSequence,
    template: &FaceMesh,
    topology: &FaceTopology,
    group: &str,
    factor: f64,
) -> Result<MeshSequence> {
    if !factor.is_finite() {
        return Err(Error::InvalidArgument(format!("scale factor {factor} is not finite")));
    }
    let range = topology.group(group)?.indices();
    check_points("template", template.len(), topology.n_points)?;
    let mut out = meshes.clone();
    for (t, frame) in out.frames.iter_mut().enumerate() {
        check_points(&format!("frame {t}"), frame.len(), topology.n_points)?;
        if factor == 1.0 {
            continue;
        }
        for i in range.clone() {
            let tpl = template.vertices[i];
            let v = &mut frame.vertices[i];
            for c in 0..3 {
                v[c] = tpl[c] + factor * (v[c] - tpl[c]);
            }
        }
    }
    Ok(out)
}

/// Substitutes a whole head-pose track after validating it against the old one.
pub fn replace_pose_track(current: &PoseSequence, new_pose: &PoseSequence) -> Result<PoseSequence> {
    if current.len() != new_pose.len() {
        return Err(Error::LengthMismatch {
            left: current.len(),
            right: new_pose.len(),
        });
    }
    PoseSequence::new(new_pose.fps, new_pose.poses.clone())
}
