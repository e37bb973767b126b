//! Point-cloud spatial primitives.

mod frame;
pub mod io;
mod neighbors;
mod relation;
mod sampling;

pub use frame::{local_frame, local_frame_oriented, LocalFrame};
pub use neighbors::{
    ball_candidates, build_neighborhoods, knn_candidates, normalize_local, CentroidMode, NeighborMode,
    NeighborhoodIndex, Reference, ScaleNeighbors, ScaleSpec, UniformGrid,
};
pub use relation::{compute_relation, Plane, RelationKind};
pub use sampling::{farthest_point_sample, geometric_start, FpsStart};

use thiserror::Error;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point cloud is empty")]
    Empty,
    #[error("{field} has {got} entries, expected {expected}")]
    Length {
        field: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("normal {index} has norm {norm}, expected 1")]
    NonUnitNormal { index: usize, norm: f64 },
    #[error("cannot sample {requested} points from a cloud of {available}")]
    TooManySamples { requested: usize, available: usize },
    #[error("index {index} out of range for {len} points")]
    Index { index: usize, len: usize },
    #[error("radii must be positive and strictly increasing, got {0:?}")]
    Radii(Vec<f64>),
    #[error("neighbour count must be at least 1")]
    ZeroNeighbors,
    #[error("point cloud has no normals; disable rotation-robust (local frame) mode or supply normals")]
    MissingNormals,
    #[error("relation {0} needs point normals")]
    RelationNeedsNormals(&'static str),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn normalized(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a).max(1e-12))
}

/// Counter-clockwise rotation by `angle` radians about the Y axis.
pub fn rotation_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Rotation about an arbitrary unit axis (Rodrigues).
pub fn rotation_axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let [x, y, z] = normalized(axis);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}

/// Lexicographic comparison of coordinates, used wherever a choice must not
/// depend on point order.
pub fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// `N` points with optional unit normals and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub coords: Vec<Vec3>,
    pub normals: Option<Vec<Vec3>>,
    pub point_labels: Option<Vec<usize>>,
    pub shape_label: Option<usize>,
}

impl PointCloud {
    pub fn new(
        coords: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
        point_labels: Option<Vec<usize>>,
        shape_label: Option<usize>,
    ) -> Result<Self> {
        let cloud = Self {
            coords,
            normals,
            point_labels,
            shape_label,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn from_coords(coords: Vec<Vec3>) -> Result<Self> {
        Self::new(coords, None, None, None)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.coords.len();
        if n == 0 {
            return Err(GeometryError::Empty);
        }
        if let Some(normals) = &self.normals {
            if normals.len() != n {
                return Err(GeometryError::Length {
                    field: "normals",
                    got: normals.len(),
                    expected: n,
                });
            }
            for (index, &nv) in normals.iter().enumerate() {
                let len = norm(nv);
                if (len - 1.0).abs() > 1e-6 {
                    return Err(GeometryError::NonUnitNormal { index, norm: len });
                }
            }
        }
        if let Some(labels) = &self.point_labels {
            if labels.len() != n {
                return Err(GeometryError::Length {
                    field: "point_labels",
                    got: labels.len(),
                    expected: n,
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn has_normals(&self) -> bool {
        self.normals.is_some()
    }

    /// Centres the cloud on its mean and scales it into the unit sphere.
    /// Normals are left untouched.
    pub fn normalize_global(&self) -> PointCloud {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            c = add(c, *p);
        }
        c = scale(c, 1.0 / n);
        let centred: Vec<Vec3> = self.coords.iter().map(|&p| sub(p, c)).collect();
        let max_norm = centred.iter().map(|&p| norm(p)).fold(0.0, f64::max).max(1e-12);
        PointCloud {
            coords: centred.into_iter().map(|p| scale(p, 1.0 / max_norm)).collect(),
            ..self.clone()
        }
    }

    /// Applies `x -> R x + t`; normals are rotated.
    pub fn rigid_transform(&self, rotation: &Mat3, translation: Vec3) -> PointCloud {
        PointCloud {
            coords: self
                .coords
                .iter()
                .map(|&p| add(mat_vec(rotation, p), translation))
                .collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|&nv| mat_vec(rotation, nv)).collect()),
            ..self.clone()
        }
    }

    pub fn translated(&self, t: Vec3) -> PointCloud {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        self.rigid_transform(&id, t)
    }

    /// Points listed in `indices` order, with their normals and labels.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            point_labels: self
                .point_labels
                .as_ref()
                .map(|ls| indices.iter().map(|&i| ls[i]).collect()),
            shape_label: self.shape_label,
        }
    }
}
