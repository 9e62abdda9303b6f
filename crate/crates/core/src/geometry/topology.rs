use std::f64::consts::PI;

use crate::error::{Error, Result};

/// A named, contiguous index range `[start, end)` of landmarks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LandmarkGroup {
    pub name: &'static str,
    pub start: usize,
    pub end: usize,
    /// Drawn as a closed loop.
    pub closed: bool,
}

impl LandmarkGroup {
    pub fn indices(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FaceTopology {
    pub n_points: usize,
    pub groups: Vec<LandmarkGroup>,
}

impl Default for FaceTopology {
    fn default() -> Self {
        Self::desk()
    }
}

impl FaceTopology {
    /// The 50-point layout used throughout the crate.
    pub fn desk() -> Self {
        let g = |name, start, end, closed| LandmarkGroup {
            name,
            start,
            end,
            closed,
        };
        Self {
            n_points: 50,
            groups: vec![
                g("jaw", 0, 11, false),
                g("right_brow", 11, 16, false),
                g("left_brow", 16, 21, false),
                g("nose", 21, 26, false),
                g("right_eye", 26, 32, true),
                g("left_eye", 32, 38, true),
                g("upper_lip", 38, 44, true),
                g("lower_lip", 44, 50, true),
            ],
        }
    }

    /// Checks that the groups are disjoint and tile `[0, n_points)`.
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.n_points];
        for grp in &self.groups {
            if grp.start >= grp.end || grp.end > self.n_points {
                return Err(Error::Topology(format!("group {} has bad range", grp.name)));
            }
            for i in grp.indices() {
                if std::mem::replace(&mut covered[i], true) {
                    return Err(Error::Topology(format!("index {i} in two groups")));
                }
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Topology(format!("index {i} in no group")));
        }
        Ok(())
    }

    pub fn group(&self, name: &str) -> Result<&LandmarkGroup> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    /// Neutral face in head-centred coordinates: x right, y down, z away from
    /// the camera, roughly one unit per half face width. Coordinates are
    /// exactly representable in `f32`.
    pub fn canonical_mesh(&self) -> FaceMesh {
        let mut v = Vec::with_capacity(50);
        for i in 0..11 {
            let th = PI * i as f64 / 10.0;
            v.push([-th.cos(), -0.2 + 1.2 * th.sin(), 0.2 * th.cos().abs()]);
        }
        for (lo, hi) in [(-0.8, -0.2), (0.2, 0.8)] {
            for i in 0..5 {
                let s = i as f64 / 4.0;
                v.push([lo + (hi - lo) * s, -0.55 - 0.1 * (PI * s).sin(), -0.05]);
            }
        }
        v.extend([
            [0.0, -0.35, -0.1],
            [0.0, -0.15, -0.2],
            [0.0, 0.05, -0.3],
            [-0.12, 0.15, -0.15],
            [0.12, 0.15, -0.15],
        ]);
        for cx in [-0.45, 0.45] {
            for i in 0..6 {
                let th = 2.0 * PI * i as f64 / 6.0;
                v.push([cx + 0.18 * th.cos(), -0.3 + 0.07 * th.sin(), -0.05]);
            }
        }
        v.extend([
            [-0.4, 0.45, -0.1],
            [-0.15, 0.37, -0.15],
            [0.15, 0.37, -0.15],
            [0.4, 0.45, -0.1],
            [0.15, 0.46, -0.13],
            [-0.15, 0.46, -0.13],
        ]);
        v.extend([
            [-0.38, 0.52, -0.1],
            [-0.15, 0.52, -0.13],
            [0.15, 0.52, -0.13],
            [0.38, 0.52, -0.1],
            [0.15, 0.65, -0.12],
            [-0.15, 0.65, -0.12],
        ]);
        debug_assert_eq!(v.len(), self.n_points);
        for p in &mut v {
            for c in p.iter_mut() {
                *c = f64::from(*c as f32);
            }
        }
        FaceMesh { vertices: v }
    }
}

/// Vertex positions for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceMesh {
    pub vertices: Vec<[f64; 3]>,
}

impl FaceMesh {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Row-major `x, y, z` flattening.
    pub fn flat(&self) -> Vec<f64> {
        self.vertices.iter().flatten().copied().collect()
    }

    pub fn from_flat(data: &[f64]) -> Result<Self> {
        if data.len() % 3 != 0 {
            return Err(Error::dim(format!("{} values is not a list of 3-vectors", data.len())));
        }
        Ok(Self {
            vertices: data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.vertices.iter().flatten().all(|x| x.is_finite())
    }
}

/// Projected 2D landmark positions in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFrame {
    pub points: Vec<[f64; 2]>,
}

impl LandmarkFrame {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
