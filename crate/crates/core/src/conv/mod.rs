//! The RS-Conv operator: a shared relation mapping turns each low-level
//! relation `h_ij` into per-channel weights for the neighbour feature, the
//! weighted features are aggregated symmetrically, activated, fused across
//! scales and lifted by a channel-raising layer.

mod grid;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::geometry::{
    build_neighborhoods, compute_relation, local_frame_oriented, sub, CentroidMode, LocalFrame, NeighborMode,
    PointCloud, RelationKind, ScaleSpec,
};
use crate::tensor::{BnId, ParamId, ParamKind, ParamStore, Real, ReduceKind, Tape, Tensor, Var};
use crate::{Error, Result};

pub use grid::{dense_conv2d, grid_conv_oracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Max,
    Avg,
    Sum,
}

impl Aggregation {
    pub fn reduce_kind(self) -> ReduceKind {
        match self {
            Aggregation::Max => ReduceKind::Max,
            Aggregation::Avg => ReduceKind::Mean,
            Aggregation::Sum => ReduceKind::Sum,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Max => "max",
            Aggregation::Avg => "avg",
            Aggregation::Sum => "sum",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "avg" => Ok(Aggregation::Avg),
            "sum" => Ok(Aggregation::Sum),
            _ => Err(Error::Config(format!("unknown aggregation `{s}`"))),
        }
    }
}

/// How the per-scale outputs of a layer are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleFusion {
    Max,
    Sum,
}

impl fmt::Display for ScaleFusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScaleFusion::Max => "max",
            ScaleFusion::Sum => "sum",
        })
    }
}

impl FromStr for ScaleFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(ScaleFusion::Max),
            "sum" => Ok(ScaleFusion::Sum),
            _ => Err(Error::Config(format!("unknown scale fusion `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RSConvLayerConfig {
    pub in_channels: usize,
    pub relation_kind: RelationKind,
    /// Output widths of the relation mapping's layers; the last equals
    /// `in_channels`.
    pub relation_mlp_widths: Vec<usize>,
    pub out_channels: usize,
    pub scales: Vec<ScaleSpec>,
    pub aggregation: Aggregation,
    pub relation_cut_ratio: f64,
    pub centroid_mode: CentroidMode,
    pub neighbor_mode: NeighborMode,
    pub scale_fusion: ScaleFusion,
}

impl RSConvLayerConfig {
    pub fn new(in_channels: usize, out_channels: usize, relation_kind: RelationKind, scales: Vec<ScaleSpec>) -> Self {
        Self {
            in_channels,
            relation_kind,
            relation_mlp_widths: Self::default_relation_widths(in_channels),
            out_channels,
            scales,
            aggregation: Aggregation::Max,
            relation_cut_ratio: 0.0,
            centroid_mode: CentroidMode::SampledPoint,
            neighbor_mode: NeighborMode::RandomInBall,
            scale_fusion: ScaleFusion::Max,
        }
    }

    /// Three layers: `16, 64, C` for wide inputs, otherwise `C, C, C`.
    pub fn default_relation_widths(in_channels: usize) -> Vec<usize> {
        if in_channels >= 64 {
            vec![16, 64, in_channels]
        } else {
            vec![in_channels; 3]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 {
            return bad("layer channel counts must be positive".into());
        }
        match self.relation_mlp_widths.last() {
            None => return bad("relation mapping needs at least one layer".into()),
            Some(&w) if w != self.in_channels => {
                return bad(format!(
                    "last relation mapping width {w} must equal the input channel count {}",
                    self.in_channels
                ))
            }
            _ => {}
        }
        if self.relation_mlp_widths.contains(&0) {
            return bad("relation mapping widths must be positive".into());
        }
        if self.scales.is_empty() || self.scales.len() > 3 {
            return bad(format!("a layer takes 1 to 3 scales, got {}", self.scales.len()));
        }
        if self.scales.iter().any(|s| s.k == 0) {
            return bad("neighbour counts must be at least 1".into());
        }
        if self.neighbor_mode == NeighborMode::RandomInBall {
            let ok = self.scales.iter().all(|s| s.radius > 0.0 && s.radius.is_finite())
                && self.scales.windows(2).all(|w| w[0].radius < w[1].radius);
            if !ok {
                return bad("radii must be positive and strictly increasing".into());
            }
        }
        if !(0.0..1.0).contains(&self.relation_cut_ratio) {
            return bad(format!("relation cut ratio {} outside [0, 1)", self.relation_cut_ratio));
        }
        Ok(())
    }
}

/// Affine map with optional batch normalisation and ReLU, applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: Option<BnId>,
    pub relu: bool,
}

impl Dense {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        bn: bool,
        relu: bool,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), &[inputs, outputs], ParamKind::Weight, inputs)?;
        let bias = store.add(&format!("{name}.bias"), &[1, outputs], ParamKind::Bias, inputs)?;
        let bn = if bn {
            Some(store.add_batchnorm(&format!("{name}.bn"), outputs)?)
        } else {
            None
        };
        Ok(Self { weight, bias, bn, relu })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, training: bool) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let mut y = tape.matmul(x, w)?;
        y = tape.add(y, b)?;
        if let Some(bn) = self.bn {
            y = tape.batchnorm(y, bn, training)?;
        }
        if self.relu {
            y = tape.relu(y);
        }
        Ok(y)
    }

    pub fn in_width<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.weight).value.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RSConvLayerParams {
    /// Relation mapping; shared by every neighbour, scale and view.
    pub mapping: Vec<Dense>,
    pub raise: Dense,
}

impl RSConvLayerParams {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, config: &RSConvLayerConfig) -> Result<Self> {
        config.validate()?;
        let mut width = config.relation_kind.channels();
        let last = config.relation_mlp_widths.len() - 1;
        let mut mapping = Vec::new();
        for (i, &w) in config.relation_mlp_widths.iter().enumerate() {
            let hidden = i < last;
            mapping.push(Dense::register(store, &format!("{prefix}.mapping{i}"), width, w, hidden, hidden)?);
            width = w;
        }
        let raise = Dense::register(store, &format!("{prefix}.raise"), config.in_channels, config.out_channels, true, true)?;
        Ok(Self { mapping, raise })
    }
}

/// `w_ij = M(h_ij)` for a `rows × h` block of relations. Rows flagged in
/// `cut_mask` get zero weights.
pub fn relation_weights<T: Real>(
    tape: &mut Tape<T>,
    params: &RSConvLayerParams,
    relations: Var,
    training: bool,
    cut_mask: Option<&[bool]>,
) -> Result<Var> {
    let shape = tape.shape(relations).to_vec();
    let expected = params.mapping[0].in_width(tape.store());
    if shape.len() != 2 || shape[1] != expected {
        return Err(Error::Tensor(crate::tensor::TensorError::Shape {
            op: "relation_weights",
            lhs: shape,
            rhs: vec![expected],
        }));
    }
    let mut w = relations;
    for layer in &params.mapping {
        w = layer.forward(tape, w, training)?;
    }
    if let Some(mask) = cut_mask {
        if mask.len() != shape[0] {
            return Err(Error::Invalid(format!(
                "cut mask has {} entries for {} relations",
                mask.len(),
                shape[0]
            )));
        }
        let keep: Vec<T> = mask.iter().map(|&cut| if cut { T::zero() } else { T::one() }).collect();
        let keep = tape.constant(Tensor::new(vec![mask.len(), 1], keep)?);
        w = tape.mul(w, keep)?;
    }
    Ok(w)
}

/// Neighbourhoods of one scale of one cloud, flattened `S × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGeometry {
    pub k: usize,
    /// Neighbour rows of the layer input.
    pub indices: Vec<usize>,
    /// One `S·K × h` block per relation view.
    pub relations: Vec<Vec<f64>>,
    /// Neighbour positions relative to the reference, `S·K × 3`.
    pub local_coords: Vec<f64>,
    pub valid_counts: Vec<usize>,
}

/// Everything a layer needs to know about one cloud's geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeometry {
    pub input_points: usize,
    pub centroids: Vec<usize>,
    pub scales: Vec<ScaleGeometry>,
}

/// Groups `cloud` around `centroids` and computes relations and local
/// coordinates. With `local_frames` all geometry is expressed in a
/// normal-aligned frame at each centroid, which makes it independent of the
/// cloud's pose.
pub fn prepare_layer<R: Rng + ?Sized>(
    config: &RSConvLayerConfig,
    cloud: &PointCloud,
    centroids: &[usize],
    local_frames: bool,
    rng: &mut R,
) -> Result<LayerGeometry> {
    let kind = config.relation_kind;
    if kind.needs_normals() && !cloud.has_normals() {
        return Err(crate::geometry::GeometryError::RelationNeedsNormals(kind.name()).into());
    }
    let nb = build_neighborhoods(
        &cloud.coords,
        centroids,
        &config.scales,
        config.neighbor_mode,
        config.centroid_mode,
        rng,
    )?;
    let frames = if local_frames {
        let widest = nb.scales.last().expect("validated scales");
        let mut frames = Vec::with_capacity(centroids.len());
        for (i, &c) in centroids.iter().enumerate() {
            let row = widest.row(i);
            let genuine = &row[..widest.valid_counts[i].max(1).min(row.len())];
            frames.push(local_frame_oriented(cloud, c, genuine)?);
        }
        Some(frames)
    } else {
        None
    };
    let views = kind.views();
    let h = kind.channels();
    let normals = cloud.normals.as_deref();
    let mut scales = Vec::with_capacity(nb.scales.len());
    for s in &nb.scales {
        let rows = s.indices.len();
        let mut relations = vec![Vec::with_capacity(rows * h); views.len()];
        let mut local_coords = Vec::with_capacity(rows * 3);
        for (slot, &j) in s.indices.iter().enumerate() {
            let ci = slot / s.k;
            let c = centroids[ci];
            let reference = s.reference(&cloud.coords, ci);
            let (xi, xj, ni, nj) = match &frames {
                Some(f) => {
                    let frame = LocalFrame {
                        origin: reference,
                        rotation: f[ci].rotation,
                    };
                    (
                        [0.0; 3],
                        frame.to_local(cloud.coords[j]),
                        normals.map(|n| frame.rotate(n[c])),
                        normals.map(|n| frame.rotate(n[j])),
                    )
                }
                None => (reference, cloud.coords[j], normals.map(|n| n[c]), normals.map(|n| n[j])),
            };
            let rel = compute_relation(kind, xi, xj, ni, nj)?;
            for (v, chunk) in rel.chunks(h).enumerate() {
                relations[v].extend_from_slice(chunk);
            }
            local_coords.extend_from_slice(&sub(xj, xi));
        }
        scales.push(ScaleGeometry {
            k: s.k,
            indices: s.indices.clone(),
            relations,
            local_coords,
            valid_counts: s.valid_counts.clone(),
        });
    }
    Ok(LayerGeometry {
        input_points: cloud.len(),
        centroids: centroids.to_vec(),
        scales,
    })
}

/// Source of the neighbour features `f_xj`.
#[derive(Debug, Clone, Copy)]
pub enum LayerInput {
    /// Rows of the previous layer's output, clouds stacked in batch order.
    Features(Var),
    /// Neighbour coordinates relative to the reference point (first layer).
    LocalCoords,
}

/// One RS-Conv layer over a batch of clouds; returns the stacked
/// `Σ S_b × C_out` features of all centroids.
pub fn rs_conv_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    config: &RSConvLayerConfig,
    params: &RSConvLayerParams,
    input: LayerInput,
    geoms: &[&LayerGeometry],
    training: bool,
    mut cut_rng: Option<&mut R>,
) -> Result<Var> {
    if geoms.is_empty() {
        return Err(Error::Invalid("rs_conv_forward needs at least one cloud".into()));
    }
    let c_in = config.in_channels;
    match input {
        LayerInput::Features(v) => {
            let rows: usize = geoms.iter().map(|g| g.input_points).sum();
            if tape.shape(v) != [rows, c_in] {
                return Err(Error::Tensor(crate::tensor::TensorError::Shape {
                    op: "rs_conv_forward",
                    lhs: tape.shape(v).to_vec(),
                    rhs: vec![rows, c_in],
                }));
            }
        }
        LayerInput::LocalCoords if c_in != 3 => {
            return Err(Error::Config(format!("coordinate input needs 3 input channels, layer has {c_in}")));
        }
        LayerInput::LocalCoords => {}
    }
    let centroids: usize = geoms.iter().map(|g| g.centroids.len()).sum();
    let h = config.relation_kind.channels();
    let views = geoms[0].scales[0].relations.len();

    // The mapping runs once over the relations of every scale and view, so
    // its batch norms see one joint batch and their running statistics
    // describe exactly what inference will feed them.
    let mut blocks = Vec::with_capacity(config.scales.len() * views);
    let mut all_rel: Vec<T> = Vec::new();
    let mut all_mask: Vec<bool> = Vec::new();
    let mut offset = 0;
    for (si, spec) in config.scales.iter().enumerate() {
        let rows = centroids * spec.k;
        let mask: Option<Vec<bool>> = match cut_rng.as_deref_mut() {
            Some(rng) if training && config.relation_cut_ratio > 0.0 => {
                Some((0..rows).map(|_| rng.random::<f64>() < config.relation_cut_ratio).collect())
            }
            _ => None,
        };
        for v in 0..views {
            for g in geoms {
                all_rel.extend(g.scales[si].relations[v].iter().map(|&x| T::lit(x)));
            }
            match &mask {
                Some(m) => all_mask.extend_from_slice(m),
                None => all_mask.extend(std::iter::repeat_n(false, rows)),
            }
            blocks.push((si, offset, offset + rows));
            offset += rows;
        }
    }
    let rel = tape.constant(Tensor::new(vec![offset, h], all_rel)?);
    let any_cut = all_mask.iter().any(|&c| c);
    let weights = relation_weights(tape, params, rel, training, any_cut.then_some(&all_mask[..]))?;

    let mut per_scale: Vec<Option<Var>> = vec![None; config.scales.len()];
    let mut gathered: Vec<Option<Var>> = vec![None; config.scales.len()];
    for (si, start, end) in blocks {
        let k = config.scales[si].k;
        let rows = end - start;
        let f = match gathered[si] {
            Some(f) => f,
            None => {
                let f = match input {
                    LayerInput::Features(v) => {
                        let mut idx = Vec::with_capacity(rows);
                        let mut base = 0;
                        for g in geoms {
                            idx.extend(g.scales[si].indices.iter().map(|&j| j + base));
                            base += g.input_points;
                        }
                        tape.gather_rows(v, &idx)?
                    }
                    LayerInput::LocalCoords => {
                        let data: Vec<T> = geoms
                            .iter()
                            .flat_map(|g| g.scales[si].local_coords.iter().map(|&x| T::lit(x)))
                            .collect();
                        tape.constant(Tensor::new(vec![rows, 3], data)?)
                    }
                };
                gathered[si] = Some(f);
                f
            }
        };
        let w = if start == 0 && end == offset {
            weights
        } else {
            tape.slice_rows(weights, start, end)?
        };
        let wf = tape.mul(w, f)?;
        let grouped = tape.reshape(wf, &[centroids, k, c_in])?;
        let pooled = tape.reduce(config.aggregation.reduce_kind(), grouped, 1)?;
        let out = tape.relu(pooled);
        per_scale[si] = Some(match per_scale[si] {
            None => out,
            Some(a) => tape.add(a, out)?,
        });
    }
    let per_scale: Vec<Var> = per_scale.into_iter().map(|v| v.expect("every scale has a view")).collect();
    let fused = if per_scale.len() == 1 {
        per_scale[0]
    } else {
        let stacked = tape.stack(&per_scale)?;
        let kind = match config.scale_fusion {
            ScaleFusion::Max => ReduceKind::Max,
            ScaleFusion::Sum => ReduceKind::Sum,
        };
        tape.reduce(kind, stacked, 0)?
    };
    params.raise.forward(tape, fused, training)
}

#[cfg(test)]
mod tests;
