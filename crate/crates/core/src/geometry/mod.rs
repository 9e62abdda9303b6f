//! Face topology, rigid head pose and pinhole projection to 2D landmarks.

mod camera;
mod pose;
mod seqfile;
mod topology;

pub use camera::{project, project_sequence, CameraIntrinsics};
pub use pose::{apply_pose, rotation_from_axis_angle, Mat3, PoseVector};
pub use seqfile::{LandmarkSequence, MeshSequence, PoseSequence};
pub use topology::{FaceMesh, FaceTopology, LandmarkFrame, LandmarkGroup};
