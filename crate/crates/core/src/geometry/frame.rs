use super::{cross, dot, mat_vec, norm, normalized, scale, sub, GeometryError, Mat3, PointCloud, Result, Vec3};

/// Orthonormal coordinate system attached to a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: Vec3,
    /// Rows are the local axes; maps world offsets to local coordinates.
    pub rotation: Mat3,
}

impl LocalFrame {
    /// Frame whose third axis is `normal`, first axis the projection of a
    /// fixed world axis onto the tangent plane. A normal of `+z` gives the
    /// identity.
    pub fn from_normal(origin: Vec3, normal: Vec3) -> Self {
        let n = normalized(normal);
        let a = if n[0].abs() > 0.9 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
        Self::with_tangent_hint(origin, n, a).unwrap_or(Self {
            origin,
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        })
    }

    /// Frame whose third axis is `normal` and whose first axis follows the
    /// tangential part of `hint`. `None` when that part vanishes.
    pub fn with_tangent_hint(origin: Vec3, normal: Vec3, hint: Vec3) -> Option<Self> {
        let n = normalized(normal);
        let v = sub(hint, scale(n, dot(hint, n)));
        if norm(v) <= 1e-9 * norm(hint).max(1e-300) {
            return None;
        }
        let t1 = normalized(v);
        let t2 = cross(n, t1);
        Some(Self {
            origin,
            rotation: [t1, t2, n],
        })
    }

    pub fn to_local(&self, p: Vec3) -> Vec3 {
        mat_vec(&self.rotation, sub(p, self.origin))
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation, v)
    }
}

fn centroid_normal(cloud: &PointCloud, centroid: usize) -> Result<Vec3> {
    let normals = cloud.normals.as_ref().ok_or(GeometryError::MissingNormals)?;
    normals.get(centroid).copied().ok_or(GeometryError::Index {
        index: centroid,
        len: cloud.len(),
    })
}

/// Normal-aligned frame at `centroid` with a fixed tangent convention.
pub fn local_frame(cloud: &PointCloud, centroid: usize) -> Result<LocalFrame> {
    let n = centroid_normal(cloud, centroid)?;
    Ok(LocalFrame::from_normal(cloud.coords[centroid], n))
}

/// Normal-aligned frame whose tangent follows the neighbourhood, so the
/// frame rotates with the cloud. The tangent is the projected sum of offsets
/// to `neighbors`, else the farthest neighbour's projected offset, else the
/// fixed convention of [`local_frame`].
pub fn local_frame_oriented(cloud: &PointCloud, centroid: usize, neighbors: &[usize]) -> Result<LocalFrame> {
    let n = centroid_normal(cloud, centroid)?;
    let origin = cloud.coords[centroid];
    let mut offsets = Vec::with_capacity(neighbors.len());
    for &j in neighbors {
        let p = cloud.coords.get(j).ok_or(GeometryError::Index {
            index: j,
            len: cloud.len(),
        })?;
        offsets.push(sub(*p, origin));
    }
    let sum = offsets.iter().fold([0.0; 3], |acc, o| super::add(acc, *o));
    if let Some(f) = LocalFrame::with_tangent_hint(origin, n, sum) {
        return Ok(f);
    }
    let mut by_dist = offsets.clone();
    by_dist.sort_by(|a, b| dot(*b, *b).total_cmp(&dot(*a, *a)));
    for o in by_dist {
        if let Some(f) = LocalFrame::with_tangent_hint(origin, n, o) {
            return Ok(f);
        }
    }
    Ok(LocalFrame::from_normal(origin, n))
}
