use std::fmt;
use std::str::FromStr;

use super::{dot, norm, sub, GeometryError, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    XY,
    XZ,
    YZ,
}

impl Plane {
    /// Axis that is zeroed when projecting onto the plane.
    pub fn dropped_axis(self) -> usize {
        match self {
            Plane::XY => 2,
            Plane::XZ => 1,
            Plane::YZ => 0,
        }
    }

    fn project(self, p: Vec3) -> Vec3 {
        let mut q = p;
        q[self.dropped_axis()] = 0.0;
        q
    }
}

/// Low-level geometric relation between a centroid and a neighbour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RelationKind {
    /// `(d)`
    DistOnly,
    /// `(d, x_i - x_j)`
    DistDiff,
    /// `(d, x_i - x_j, x_i, x_j)`
    Full,
    /// `(cos(n_i, n_j), n_i, n_j)`
    NormalCos,
    /// `Full` after projecting both points onto a coordinate plane.
    Planar(Plane),
    /// The three planar views, each passed through the same mapping.
    PlanarFusion,
}

impl RelationKind {
    /// Width of one relation vector, i.e. the input width of the mapping.
    pub fn channels(self) -> usize {
        match self {
            RelationKind::DistOnly => 1,
            RelationKind::DistDiff => 4,
            RelationKind::NormalCos => 7,
            RelationKind::Full | RelationKind::Planar(_) | RelationKind::PlanarFusion => 10,
        }
    }

    /// Single-view kinds that make up this relation.
    pub fn views(self) -> Vec<RelationKind> {
        match self {
            RelationKind::PlanarFusion => vec![
                RelationKind::Planar(Plane::XY),
                RelationKind::Planar(Plane::XZ),
                RelationKind::Planar(Plane::YZ),
            ],
            k => vec![k],
        }
    }

    pub fn needs_normals(self) -> bool {
        self == RelationKind::NormalCos
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationKind::DistOnly => "dist_only",
            RelationKind::DistDiff => "dist_diff",
            RelationKind::Full => "full",
            RelationKind::NormalCos => "normal_cos",
            RelationKind::Planar(Plane::XY) => "planar_xy",
            RelationKind::Planar(Plane::XZ) => "planar_xz",
            RelationKind::Planar(Plane::YZ) => "planar_yz",
            RelationKind::PlanarFusion => "planar_fusion",
        }
    }

    pub const ALL: [RelationKind; 8] = [
        RelationKind::DistOnly,
        RelationKind::DistDiff,
        RelationKind::Full,
        RelationKind::NormalCos,
        RelationKind::Planar(Plane::XY),
        RelationKind::Planar(Plane::XZ),
        RelationKind::Planar(Plane::YZ),
        RelationKind::PlanarFusion,
    ];
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        RelationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| GeometryError::Invalid(format!("unknown relation kind `{s}`")))
    }
}

fn full(xi: Vec3, xj: Vec3, out: &mut Vec<f64>) {
    let d = sub(xi, xj);
    out.push(norm(d));
    out.extend_from_slice(&d);
    out.extend_from_slice(&xi);
    out.extend_from_slice(&xj);
}

/// Relation vector `h_ij`. `PlanarFusion` yields its three views back to back.
pub fn compute_relation(
    kind: RelationKind,
    xi: Vec3,
    xj: Vec3,
    ni: Option<Vec3>,
    nj: Option<Vec3>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(kind.channels() * kind.views().len());
    match kind {
        RelationKind::DistOnly => out.push(norm(sub(xi, xj))),
        RelationKind::DistDiff => {
            let d = sub(xi, xj);
            out.push(norm(d));
            out.extend_from_slice(&d);
        }
        RelationKind::Full => full(xi, xj, &mut out),
        RelationKind::NormalCos => {
            let (Some(a), Some(b)) = (ni, nj) else {
                return Err(GeometryError::RelationNeedsNormals(kind.name()));
            };
            out.push(dot(a, b) / (norm(a) * norm(b)).max(1e-12));
            out.extend_from_slice(&a);
            out.extend_from_slice(&b);
        }
        RelationKind::Planar(p) => full(p.project(xi), p.project(xj), &mut out),
        RelationKind::PlanarFusion => {
            for v in kind.views() {
                if let RelationKind::Planar(p) = v {
                    full(p.project(xi), p.project(xj), &mut out);
                }
            }
        }
    }
    Ok(out)
}
