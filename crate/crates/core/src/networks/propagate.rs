use crate::conv::Dense;
use crate::geometry::{dist2, Vec3};
use crate::tensor::{Real, ReduceKind, Tape, Tensor, Var};
use crate::{Error, Result};

/// Inverse-square-distance weights over the nearest coarse points.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    /// Sources per fine point: `min(3, coarse count)`.
    pub k: usize,
    /// `fine × k` coarse indices.
    pub indices: Vec<usize>,
    /// `fine × k` weights; each row sums to one.
    pub weights: Vec<f64>,
}

pub fn interpolation_weights(fine: &[Vec3], coarse: &[Vec3]) -> Result<Interpolation> {
    if coarse.is_empty() {
        return Err(Error::Invalid("feature propagation needs at least one coarse point".into()));
    }
    let k = coarse.len().min(3);
    let mut indices = Vec::with_capacity(fine.len() * k);
    let mut weights = Vec::with_capacity(fine.len() * k);
    let mut order: Vec<usize> = (0..coarse.len()).collect();
    for &p in fine {
        order.sort_by(|&a, &b| dist2(coarse[a], p).total_cmp(&dist2(coarse[b], p)).then(a.cmp(&b)));
        let w: Vec<f64> = order[..k].iter().map(|&j| 1.0 / (dist2(coarse[j], p) + 1e-8)).collect();
        let total: f64 = w.iter().sum();
        indices.extend_from_slice(&order[..k]);
        weights.extend(w.iter().map(|v| v / total));
    }
    Ok(Interpolation { k, indices, weights })
}

/// Interpolates coarse features onto the fine points of every cloud in the
/// batch, appends the skip features and mixes with `mix`.
pub fn feature_propagation<T: Real>(
    tape: &mut Tape<T>,
    fine: &[&[Vec3]],
    coarse: &[&[Vec3]],
    coarse_features: Var,
    skip: Option<Var>,
    mix: &Dense,
    training: bool,
) -> Result<Var> {
    if fine.len() != coarse.len() || fine.is_empty() {
        return Err(Error::Invalid("fine and coarse batches differ".into()));
    }
    let coarse_rows: usize = coarse.iter().map(|c| c.len()).sum();
    let fine_rows: usize = fine.iter().map(|f| f.len()).sum();
    let shape = tape.shape(coarse_features).to_vec();
    if shape.len() != 2 || shape[0] != coarse_rows {
        return Err(Error::Invalid(format!(
            "coarse features have shape {shape:?}, expected {coarse_rows} rows"
        )));
    }
    let channels = shape[1];
    let k = coarse.iter().map(|c| c.len().min(3)).min().unwrap_or(1);
    let mut idx = Vec::with_capacity(fine_rows * k);
    let mut wts = Vec::with_capacity(fine_rows * k);
    let mut offset = 0;
    for (f, c) in fine.iter().zip(coarse) {
        let interp = interpolation_weights(f, c)?;
        if interp.k != k {
            return Err(Error::Invalid("clouds in a batch must have equal coarse sizes".into()));
        }
        idx.extend(interp.indices.iter().map(|&j| j + offset));
        wts.extend(interp.weights.iter().map(|&w| T::lit(w)));
        offset += c.len();
    }
    let gathered = tape.gather_rows(coarse_features, &idx)?;
    let w = tape.constant(Tensor::new(vec![fine_rows * k, 1], wts)?);
    let weighted = tape.mul(gathered, w)?;
    let grouped = tape.reshape(weighted, &[fine_rows, k, channels])?;
    let mut x = tape.reduce(ReduceKind::Sum, grouped, 1)?;
    if let Some(s) = skip {
        x = tape.concat_cols(&[x, s])?;
    }
    mix.forward(tape, x, training)
}
