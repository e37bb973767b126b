use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;

use super::{add, dist2, lex_cmp, scale, sub, GeometryError, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeighborMode {
    /// Uniform pick without replacement among the points inside the ball.
    RandomInBall,
    /// The `K` nearest points, radius ignored.
    Knn,
}

/// Reference point that relations of a neighbourhood are measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidMode {
    SampledPoint,
    NeighborhoodMean,
    RandomMember,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub radius: f64,
    pub k: usize,
}

/// Neighbours of every centroid at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNeighbors {
    /// Query radius; infinite in k-NN mode.
    pub radius: f64,
    pub k: usize,
    /// `S × K` row-major table of point indices. Genuine neighbours come
    /// first in each row, padding repeats follow.
    pub indices: Vec<usize>,
    /// Genuine neighbours per centroid; zero flags a self-only fallback.
    pub valid_counts: Vec<usize>,
    /// Relation reference per centroid.
    pub references: Vec<Reference>,
}

/// Where a neighbourhood's relations are measured from. Stored by index so
/// the same neighbourhood can be evaluated on transformed coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Point(usize),
    /// Mean of the first `n` entries of the centroid's row.
    RowMean(usize),
}

impl ScaleNeighbors {
    pub fn row(&self, centroid: usize) -> &[usize] {
        &self.indices[centroid * self.k..(centroid + 1) * self.k]
    }

    pub fn reference(&self, coords: &[Vec3], centroid: usize) -> Vec3 {
        match self.references[centroid] {
            Reference::Point(i) => coords[i],
            Reference::RowMean(n) => {
                let row = &self.row(centroid)[..n];
                let s = row.iter().fold([0.0; 3], |acc, &j| add(acc, coords[j]));
                scale(s, 1.0 / n as f64)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodIndex {
    pub centroid_indices: Vec<usize>,
    pub scales: Vec<ScaleNeighbors>,
}

impl NeighborhoodIndex {
    pub fn num_centroids(&self) -> usize {
        self.centroid_indices.len()
    }
}

/// Bucket grid with cell size equal to the query radius.
#[derive(Debug, Clone)]
pub struct UniformGrid {
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
}

impl UniformGrid {
    pub fn new(coords: &[Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, &p) in coords.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: Vec3, cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Unordered indices with squared distance to `center` below `radius²`.
    /// `radius` must not exceed the cell size.
    pub fn query(&self, coords: &[Vec3], center: Vec3, radius: f64) -> Vec<usize> {
        debug_assert!(radius <= self.cell);
        let r2 = radius * radius;
        let k = Self::key(center, self.cell);
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(b) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.extend(b.iter().copied().filter(|&i| dist2(coords[i], center) < r2));
                    }
                }
            }
        }
        out
    }
}

/// Sorts by distance to `center`, then coordinates, then index. The order
/// does not depend on how the cloud is indexed.
fn canonical_sort(coords: &[Vec3], center: Vec3, idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        dist2(coords[a], center)
            .total_cmp(&dist2(coords[b], center))
            .then_with(|| lex_cmp(&coords[a], &coords[b]))
            .then(a.cmp(&b))
    });
}

/// Points strictly inside the ball, canonically ordered.
pub fn ball_candidates(coords: &[Vec3], grid: Option<&UniformGrid>, center: Vec3, radius: f64) -> Vec<usize> {
    let mut idx = match grid {
        Some(g) if radius.is_finite() => g.query(coords, center, radius),
        _ => {
            let r2 = radius * radius;
            (0..coords.len()).filter(|&i| dist2(coords[i], center) < r2).collect()
        }
    };
    canonical_sort(coords, center, &mut idx);
    idx
}

/// The `k` nearest points (fewer if the cloud is smaller), canonically ordered.
pub fn knn_candidates(coords: &[Vec3], center: Vec3, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, |&a, &b| {
            dist2(coords[a], center)
                .total_cmp(&dist2(coords[b], center))
                .then_with(|| lex_cmp(&coords[a], &coords[b]))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
    }
    canonical_sort(coords, center, &mut idx);
    idx
}

fn validate_scales(scales: &[ScaleSpec], mode: NeighborMode) -> Result<()> {
    if scales.is_empty() {
        return Err(GeometryError::Radii(vec![]));
    }
    if scales.iter().any(|s| s.k == 0) {
        return Err(GeometryError::ZeroNeighbors);
    }
    if mode == NeighborMode::RandomInBall {
        let radii: Vec<f64> = scales.iter().map(|s| s.radius).collect();
        let increasing = radii.windows(2).all(|w| w[0] < w[1]);
        if !increasing || radii.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(GeometryError::Radii(radii));
        }
    }
    Ok(())
}

/// Groups neighbours around each centroid at every scale.
///
/// Under-full balls are padded by re-drawing genuine neighbours with
/// replacement, so padding never brings in points from outside the ball.
pub fn build_neighborhoods<R: Rng + ?Sized>(
    coords: &[Vec3],
    centroids: &[usize],
    scales: &[ScaleSpec],
    mode: NeighborMode,
    centroid_mode: CentroidMode,
    rng: &mut R,
) -> Result<NeighborhoodIndex> {
    validate_scales(scales, mode)?;
    if let Some(&bad) = centroids.iter().find(|&&c| c >= coords.len()) {
        return Err(GeometryError::Index {
            index: bad,
            len: coords.len(),
        });
    }
    let mut out = Vec::with_capacity(scales.len());
    for spec in scales {
        let k = spec.k;
        let grid = match mode {
            NeighborMode::RandomInBall if spec.radius.is_finite() => Some(UniformGrid::new(coords, spec.radius)),
            _ => None,
        };
        let mut indices = Vec::with_capacity(centroids.len() * k);
        let mut valid_counts = Vec::with_capacity(centroids.len());
        let mut references = Vec::with_capacity(centroids.len());
        for &c in centroids {
            let center = coords[c];
            let cands = match mode {
                NeighborMode::RandomInBall => ball_candidates(coords, grid.as_ref(), center, spec.radius),
                NeighborMode::Knn => knn_candidates(coords, center, k),
            };
            let m = cands.len();
            let row_start = indices.len();
            let valid = if m == 0 {
                indices.extend(std::iter::repeat_n(c, k));
                0
            } else if m >= k {
                let mut picks = if mode == NeighborMode::Knn || m == k {
                    (0..k).collect::<Vec<_>>()
                } else {
                    sample(rng, m, k).into_vec()
                };
                picks.sort_unstable();
                indices.extend(picks.into_iter().map(|p| cands[p]));
                k
            } else {
                indices.extend_from_slice(&cands);
                for _ in m..k {
                    indices.push(cands[rng.random_range(0..m)]);
                }
                m
            };
            let reference = match centroid_mode {
                _ if valid == 0 => Reference::Point(c),
                CentroidMode::SampledPoint => Reference::Point(c),
                CentroidMode::NeighborhoodMean => Reference::RowMean(valid),
                CentroidMode::RandomMember => Reference::Point(indices[row_start + rng.random_range(0..valid)]),
            };
            valid_counts.push(valid);
            references.push(reference);
        }
        out.push(ScaleNeighbors {
            radius: if mode == NeighborMode::Knn { f64::INFINITY } else { spec.radius },
            k,
            indices,
            valid_counts,
            references,
        });
    }
    Ok(NeighborhoodIndex {
        centroid_indices: centroids.to_vec(),
        scales: out,
    })
}

/// Neighbour coordinates relative to each centroid's reference point, one
/// `S × K` block per scale.
pub fn normalize_local(coords: &[Vec3], nbhd: &NeighborhoodIndex) -> Result<Vec<Vec<Vec3>>> {
    nbhd.scales
        .iter()
        .map(|s| {
            s.indices
                .iter()
                .enumerate()
                .map(|(slot, &j)| {
                    if j >= coords.len() {
                        return Err(GeometryError::Index {
                            index: j,
                            len: coords.len(),
                        });
                    }
                    Ok(sub(coords[j], s.reference(coords, slot / s.k)))
                })
                .collect()
        })
        .collect()
}

impl NeighborMode {
    pub fn name(self) -> &'static str {
        match self {
            NeighborMode::RandomInBall => "random_in_ball",
            NeighborMode::Knn => "knn",
        }
    }
}

impl std::str::FromStr for NeighborMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_in_ball" => Ok(NeighborMode::RandomInBall),
            "knn" => Ok(NeighborMode::Knn),
            _ => Err(GeometryError::Invalid(format!("unknown neighbor mode `{s}`"))),
        }
    }
}

impl CentroidMode {
    pub fn name(self) -> &'static str {
        match self {
            CentroidMode::SampledPoint => "sampled_point",
            CentroidMode::NeighborhoodMean => "neighborhood_mean",
            CentroidMode::RandomMember => "random_member",
        }
    }
}

impl std::str::FromStr for CentroidMode {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled_point" => Ok(CentroidMode::SampledPoint),
            "neighborhood_mean" => Ok(CentroidMode::NeighborhoodMean),
            "random_member" => Ok(CentroidMode::RandomMember),
            _ => Err(GeometryError::Invalid(format!("unknown centroid mode `{s}`"))),
        }
    }
}
