use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::{normalized, scale, PointCloud, Vec3};
use crate::{rng, Error, Result};

/// Surface families. Cylinders, cones and tori are symmetric about the Y axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Sphere { radius: f64 },
    /// Axis-aligned cube; `per_face_labels` gives each face its own part.
    Cube { half_extent: f64, per_face_labels: bool },
    /// Parts: side 0, caps 1.
    Cylinder { radius: f64, height: f64 },
    /// Apex up. Parts: side 0, base 1.
    Cone { radius: f64, height: f64 },
    Torus { major: f64, minor: f64 },
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Sphere { .. } => "sphere",
            Family::Cube { .. } => "cube",
            Family::Cylinder { .. } => "cylinder",
            Family::Cone { .. } => "cone",
            Family::Torus { .. } => "torus",
        }
    }

    pub fn num_parts(&self) -> usize {
        match self {
            Family::Cube { per_face_labels: true, .. } => 6,
            Family::Cylinder { .. } | Family::Cone { .. } => 2,
            _ => 1,
        }
    }

    /// Family with size parameters drawn from the desk-scale ranges.
    pub fn random<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Result<Self> {
        Ok(match name {
            "sphere" => Family::Sphere {
                radius: rng.random_range(0.5..1.0),
            },
            "cube" => Family::Cube {
                half_extent: rng.random_range(0.4..0.8),
                per_face_labels: false,
            },
            "cylinder" => Family::Cylinder {
                radius: rng.random_range(0.3..0.6),
                height: rng.random_range(0.8..1.6),
            },
            "cone" => Family::Cone {
                radius: rng.random_range(0.4..0.8),
                height: rng.random_range(0.8..1.6),
            },
            "torus" => Family::Torus {
                major: rng.random_range(0.5..0.8),
                minor: rng.random_range(0.15..0.3),
            },
            _ => return Err(Error::Config(format!("unknown shape family `{name}`"))),
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        let valid = match *self {
            Family::Sphere { radius } => ok(radius),
            Family::Cube { half_extent, .. } => ok(half_extent),
            Family::Cylinder { radius, height } | Family::Cone { radius, height } => ok(radius) && ok(height),
            Family::Torus { major, minor } => ok(major) && ok(minor) && minor < major,
        };
        if valid {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid size parameters for {self}")))
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Family {
    type Err = Error;

    /// Unit-sized member of the named family.
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sphere" => Family::Sphere { radius: 1.0 },
            "cube" => Family::Cube {
                half_extent: 1.0,
                per_face_labels: false,
            },
            "cylinder" => Family::Cylinder { radius: 0.5, height: 1.0 },
            "cone" => Family::Cone { radius: 0.5, height: 1.0 },
            "torus" => Family::Torus { major: 0.7, minor: 0.25 },
            _ => return Err(Error::Config(format!("unknown shape family `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub family: Family,
    pub points: usize,
    pub seed: u64,
}

fn unit_direction<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v: Vec3 = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = crate::geometry::norm(v);
        if n > 1e-6 {
            return scale(v, 1.0 / n);
        }
    }
}

fn disk<R: Rng + ?Sized>(rng: &mut R, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let t = rng.random_range(0.0..2.0 * PI);
    (r * t.cos(), r * t.sin())
}

/// Picks an index with probability proportional to `areas`.
fn pick<R: Rng + ?Sized>(rng: &mut R, areas: &[f64]) -> usize {
    let total: f64 = areas.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &a) in areas.iter().enumerate() {
        if u < a {
            return i;
        }
        u -= a;
    }
    areas.len() - 1
}

/// Samples `points` points uniformly by area with exact normals and part
/// labels; the shape label is left unset.
pub fn generate(spec: &ShapeSpec) -> Result<PointCloud> {
    if spec.points < 8 {
        return Err(Error::Invalid(format!("shapes need at least 8 points, got {}", spec.points)));
    }
    spec.family.validate()?;
    let mut rng = rng::stream(spec.seed, &[]);
    let mut coords = Vec::with_capacity(spec.points);
    let mut normals = Vec::with_capacity(spec.points);
    let mut labels = Vec::with_capacity(spec.points);
    for _ in 0..spec.points {
        let (p, n, l) = match spec.family {
            Family::Sphere { radius } => {
                let d = unit_direction(&mut rng);
                (scale(d, radius), d, 0)
            }
            Family::Cube {
                half_extent: h,
                per_face_labels,
            } => {
                let face = rng.random_range(0..6);
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = [rng.random_range(-h..h), rng.random_range(-h..h), rng.random_range(-h..h)];
                p[axis] = sign * h;
                let mut n = [0.0; 3];
                n[axis] = sign;
                (p, n, if per_face_labels { face } else { 0 })
            }
            Family::Cylinder { radius, height } => {
                let side = 2.0 * PI * radius * height;
                let cap = PI * radius * radius;
                match pick(&mut rng, &[side, 2.0 * cap]) {
                    0 => {
                        let t = rng.random_range(0.0..2.0 * PI);
                        let y = rng.random_range(-height / 2.0..height / 2.0);
                        let n = [t.cos(), 0.0, t.sin()];
                        ([radius * n[0], y, radius * n[2]], n, 0)
                    }
                    _ => {
                        let s = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        let (x, z) = disk(&mut rng, radius);
                        ([x, s * height / 2.0, z], [0.0, s, 0.0], 1)
                    }
                }
            }
            Family::Cone { radius, height } => {
                let slant = radius.hypot(height);
                match pick(&mut rng, &[PI * radius * slant, PI * radius * radius]) {
                    0 => {
                        // Lateral area grows linearly with distance from the apex.
                        let f = rng.random::<f64>().sqrt();
                        let t = rng.random_range(0.0..2.0 * PI);
                        let (c, s) = (t.cos(), t.sin());
                        let p = [radius * f * c, height / 2.0 - height * f, radius * f * s];
                        (p, normalized([height * c, radius, height * s]), 0)
                    }
                    _ => {
                        let (x, z) = disk(&mut rng, radius);
                        ([x, -height / 2.0, z], [0.0, -1.0, 0.0], 1)
                    }
                }
            }
            Family::Torus { major, minor } => {
                // Area element is proportional to the distance from the axis.
                let phi = loop {
                    let phi = rng.random_range(0.0..2.0 * PI);
                    if rng.random::<f64>() * (major + minor) < major + minor * phi.cos() {
                        break phi;
                    }
                };
                let t = rng.random_range(0.0..2.0 * PI);
                let ring = major + minor * phi.cos();
                let n = [phi.cos() * t.cos(), phi.sin(), phi.cos() * t.sin()];
                ([ring * t.cos(), minor * phi.sin(), ring * t.sin()], n, 0)
            }
        };
        coords.push(p);
        normals.push(n);
        labels.push(l);
    }
    Ok(PointCloud::new(coords, Some(normals), Some(labels), None)?)
}
