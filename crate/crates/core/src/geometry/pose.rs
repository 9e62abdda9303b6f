use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::FaceMesh;

pub type Mat3 = [[f64; 3]; 3];

/// Rigid head transform: axis-angle rotation (radians × unit axis) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseVector {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseVector {
    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }

    pub fn angle(&self) -> f64 {
        self.rotation.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Finite entries and rotation angle strictly below π.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !self.to_array().iter().all(|x| x.is_finite()) {
            return Err("non-finite component".into());
        }
        if self.angle() >= PI {
            return Err(format!("rotation angle {} is not below π", self.angle()));
        }
        Ok(())
    }

    /// Maps the rotation to the equivalent axis-angle with angle in `[0, π)`.
    pub fn canonicalized(mut self) -> Self {
        let angle = self.angle();
        if angle.is_finite() && angle >= PI {
            let wrapped = angle.rem_euclid(2.0 * PI);
            let (new_angle, sign) = if wrapped >= PI {
                (2.0 * PI - wrapped, -1.0)
            } else {
                (wrapped, 1.0)
            };
            // Guard against landing exactly on π after wrapping.
            let new_angle = new_angle.min(PI - 1e-12);
            for r in &mut self.rotation {
                *r = sign * *r / angle * new_angle;
            }
        }
        self
    }
}

/// Rodrigues' formula; the zero vector maps exactly to the identity.
pub fn rotation_from_axis_angle(r: [f64; 3]) -> Mat3 {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta == 0.0 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let [x, y, z] = [r[0] / theta, r[1] / theta, r[2] / theta];
    let k: Mat3 = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let k2 = mat_mul(&k, &k);
    let (s, c) = theta.sin_cos();
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let eye = if i == j { 1.0 } else { 0.0 };
            out[i][j] = eye + s * k[i][j] + (1.0 - c) * k2[i][j];
        }
    }
    out
}

pub(crate) fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub(crate) fn mat_vec(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

/// `v' = R·v + t` for every vertex.
pub fn apply_pose(mesh: &FaceMesh, pose: &PoseVector) -> FaceMesh {
    let r = rotation_from_axis_angle(pose.rotation);
    let t = pose.translation;
    FaceMesh {
        vertices: mesh
            .vertices
            .iter()
            .map(|v| {
                let p = mat_vec(&r, v);
                [p[0] + t[0], p[1] + t[1], p[2] + t[2]]
            })
            .collect(),
    }
}

impl TryFrom<&[f64]> for PoseVector {
    type Error = Error;

    fn try_from(v: &[f64]) -> Result<Self> {
        let arr: [f64; 6] = v
            .try_into()
            .map_err(|_| Error::dim(format!("pose needs 6 values, got {}", v.len())))?;
        Ok(Self::from_array(arr))
    }
}
