//! A regular-grid convolution expressed as an RS-Conv whose relation
//! mapping is a lookup from the nine discrete stencil offsets to kernel
//! slices.

use crate::geometry::{build_neighborhoods, CentroidMode, NeighborMode, ScaleSpec, Vec3};
use crate::tensor::{ParamStore, ReduceKind, Tape, Tensor};
use crate::{Error, Result};

fn check_dims(kernel: &[f64], map: &[f64], h: usize, w: usize, c: usize) -> Result<()> {
    if h < 3 || w < 3 || c == 0 {
        return Err(Error::Invalid(format!("grid must be at least 3x3 with channels, got {h}x{w}x{c}")));
    }
    if kernel.len() != 9 * c {
        return Err(Error::Invalid(format!("kernel has {} values, expected {}", kernel.len(), 9 * c)));
    }
    if map.len() != h * w * c {
        return Err(Error::Invalid(format!("feature map has {} values, expected {}", map.len(), h * w * c)));
    }
    Ok(())
}

/// Valid 3×3 cross-correlation summed over channels. `kernel` is indexed
/// `(dy·3 + dx)·C + c`, `map` is `H × W × C` row-major; the output is
/// `(H−2) × (W−2)`.
pub fn dense_conv2d(kernel: &[f64], map: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    check_dims(kernel, map, h, w, c)?;
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    for ch in 0..c {
                        acc += kernel[(dy * 3 + dx) * c + ch] * map[((y + dy - 1) * w + (x + dx - 1)) * c + ch];
                    }
                }
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// The same convolution computed by the RS-Conv pipeline: the map becomes a
/// planar point cloud with unit spacing, each interior pixel gathers its
/// 3×3 ball, `w_ij` is looked up from the offset `x_j − x_i`, features are
/// weighted, summed over the neighbourhood without activation, and the
/// channels are summed by an all-ones raise.
pub fn grid_conv_oracle(kernel: &[f64], map: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    check_dims(kernel, map, h, w, c)?;
    let coords: Vec<Vec3> = (0..h * w).map(|i| [(i % w) as f64, (i / w) as f64, 0.0]).collect();
    let centroids: Vec<usize> = (1..h - 1).flat_map(|y| (1..w - 1).map(move |x| y * w + x)).collect();
    // No random draws happen: every interior ball holds exactly nine points.
    let mut rng = crate::rng::stream(0, &[]);
    let nb = build_neighborhoods(
        &coords,
        &centroids,
        &[ScaleSpec { radius: 1.5, k: 9 }],
        NeighborMode::RandomInBall,
        CentroidMode::SampledPoint,
        &mut rng,
    )?;
    let scale = &nb.scales[0];
    let mut weights = Vec::with_capacity(scale.indices.len() * c);
    for (slot, &j) in scale.indices.iter().enumerate() {
        let i = centroids[slot / 9];
        let dx = coords[j][0] - coords[i][0];
        let dy = coords[j][1] - coords[i][1];
        if dx.abs() > 1.0 || dy.abs() > 1.0 || scale.valid_counts[slot / 9] != 9 {
            return Err(Error::Invalid("neighbourhood is not a 3x3 grid stencil".into()));
        }
        let offset = ((dy + 1.0) as usize) * 3 + (dx + 1.0) as usize;
        weights.extend_from_slice(&kernel[offset * c..(offset + 1) * c]);
    }

    let store = ParamStore::<f64>::new();
    let mut tape = Tape::new(&store);
    let rows = scale.indices.len();
    let features = tape.constant(Tensor::new(vec![h * w, c], map.to_vec())?);
    let gathered = tape.gather_rows(features, &scale.indices)?;
    let wts = tape.constant(Tensor::new(vec![rows, c], weights)?);
    let weighted = tape.mul(wts, gathered)?;
    let grouped = tape.reshape(weighted, &[centroids.len(), 9, c])?;
    let pooled = tape.reduce(ReduceKind::Sum, grouped, 1)?;
    let ones = tape.constant(Tensor::full(&[c, 1], 1.0));
    let out = tape.matmul(pooled, ones)?;
    Ok(tape.value(out).to_vec())
}
