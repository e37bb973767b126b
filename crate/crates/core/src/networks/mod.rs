//! Hierarchical RS-CNN networks: a classifier, a part segmenter with
//! feature-propagation upsampling, and a normal regressor sharing the
//! segmentation trunk.

mod propagate;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::conv::{prepare_layer, rs_conv_forward, Dense, LayerGeometry, LayerInput, RSConvLayerConfig, RSConvLayerParams};
use crate::geometry::{farthest_point_sample, FpsStart, PointCloud, RelationKind, ScaleSpec};
use crate::rng::Stream;
use crate::tensor::{ParamStore, Real, ReduceKind, Tape, Tensor, Var};
use crate::{Error, Exec, Result};

pub use propagate::{feature_propagation, interpolation_weights, Interpolation};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Segmentation,
    NormalEstimation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Classification => "classification",
            Task::Segmentation => "segmentation",
            Task::NormalEstimation => "normal_estimation",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "segmentation" => Ok(Task::Segmentation),
            "normal_estimation" => Ok(Task::NormalEstimation),
            _ => Err(Error::Config(format!("unknown task `{s}`"))),
        }
    }
}

/// How farthest-point sampling picks its first point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsStartMode {
    /// Farthest point from the centroid; independent of point order.
    Geometric,
    /// Index 0.
    First,
    /// Uniform random index from the cloud's stream.
    Random,
}

impl fmt::Display for FpsStartMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FpsStartMode::Geometric => "geometric",
            FpsStartMode::First => "first",
            FpsStartMode::Random => "random",
        })
    }
}

impl FromStr for FpsStartMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(FpsStartMode::Geometric),
            "first" => Ok(FpsStartMode::First),
            "random" => Ok(FpsStartMode::Random),
            _ => Err(Error::Config(format!("unknown fps start `{s}`"))),
        }
    }
}

/// One downsampling stage: `points` centroids fed through an RS-Conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub points: usize,
    pub conv: RSConvLayerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub task: Task,
    pub layers: Vec<LayerSpec>,
    /// Hidden widths of the classification head; a final layer maps to
    /// `num_classes`.
    pub fc_widths: Vec<usize>,
    pub dropout: f64,
    /// Output width of each upsampling stage, coarsest first; one per layer.
    pub fp_widths: Vec<usize>,
    /// Classes for classification, parts for segmentation, 3 for normals.
    pub num_classes: usize,
    /// Width of the shape one-hot appended before the segmentation head;
    /// zero disables it.
    pub onehot_classes: usize,
    /// Express geometry in normal-aligned local frames (needs normals).
    pub local_frames: bool,
    pub fps_start: FpsStartMode,
}

fn scales(radii: &[f64], ks: &[usize]) -> Vec<ScaleSpec> {
    radii.iter().zip(ks).map(|(&radius, &k)| ScaleSpec { radius, k }).collect()
}

impl NetworkConfig {
    /// Desk-scale classifier for 256-point clouds: 256 → 64 → 16 → 1 points,
    /// 3 → 32 → 64 → 128 channels, FC 64 → 32 → K.
    pub fn desk_classifier(num_classes: usize, relation: RelationKind) -> Self {
        let mut l1 = RSConvLayerConfig::new(3, 32, relation, scales(&[0.2, 0.3, 0.45], &[8, 12, 16]));
        l1.relation_mlp_widths = vec![16, 16, 3];
        let l2 = RSConvLayerConfig::new(32, 64, relation, scales(&[0.4, 0.6, 0.9], &[8, 12, 16]));
        let l3 = RSConvLayerConfig::new(64, 128, relation, scales(&[4.0], &[16]));
        Self {
            task: Task::Classification,
            layers: vec![
                LayerSpec { points: 64, conv: l1 },
                LayerSpec { points: 16, conv: l2 },
                LayerSpec { points: 1, conv: l3 },
            ],
            fc_widths: vec![64, 32],
            dropout: 0.5,
            fp_widths: vec![],
            num_classes,
            onehot_classes: 0,
            local_frames: false,
            fps_start: FpsStartMode::Geometric,
        }
    }

    /// Classifier that only sees pairwise distances and frame-local
    /// coordinates, so its output does not depend on the cloud's pose.
    pub fn rotation_robust_classifier(num_classes: usize) -> Self {
        Self {
            local_frames: true,
            ..Self::desk_classifier(num_classes, RelationKind::DistOnly)
        }
    }

    /// Desk-scale dense predictor: 256 → 128 → 64 → 16 → 4 points.
    pub fn desk_segmenter(task: Task, num_classes: usize, onehot_classes: usize) -> Self {
        let relation = RelationKind::Full;
        let mut l1 = RSConvLayerConfig::new(3, 32, relation, scales(&[0.15, 0.25], &[8, 12]));
        l1.relation_mlp_widths = vec![16, 16, 3];
        let l2 = RSConvLayerConfig::new(32, 48, relation, scales(&[0.3, 0.45], &[8, 12]));
        let l3 = RSConvLayerConfig::new(48, 64, relation, scales(&[0.5, 0.8], &[8, 12]));
        let l4 = RSConvLayerConfig::new(64, 96, relation, scales(&[1.2], &[8]));
        Self {
            task,
            layers: vec![
                LayerSpec { points: 128, conv: l1 },
                LayerSpec { points: 64, conv: l2 },
                LayerSpec { points: 16, conv: l3 },
                LayerSpec { points: 4, conv: l4 },
            ],
            fc_widths: vec![],
            dropout: 0.0,
            fp_widths: vec![64, 64, 48, 32],
            num_classes,
            onehot_classes,
            local_frames: false,
            fps_start: FpsStartMode::Geometric,
        }
    }

    /// Tiny classifier used for gradient checks: 32 → 16 → 8 → 4 points,
    /// widths at most 16.
    pub fn miniature(num_classes: usize) -> Self {
        let relation = RelationKind::Full;
        let mut l1 = RSConvLayerConfig::new(3, 8, relation, scales(&[0.4, 0.7], &[3, 5]));
        l1.relation_mlp_widths = vec![4, 4, 3];
        let l2 = RSConvLayerConfig::new(8, 12, relation, scales(&[0.8], &[4]));
        let l3 = RSConvLayerConfig::new(12, 16, relation, scales(&[1.6], &[4]));
        Self {
            task: Task::Classification,
            layers: vec![
                LayerSpec { points: 16, conv: l1 },
                LayerSpec { points: 8, conv: l2 },
                LayerSpec { points: 4, conv: l3 },
            ],
            fc_widths: vec![8, 8],
            dropout: 0.0,
            fp_widths: vec![],
            num_classes,
            onehot_classes: 0,
            local_frames: false,
            fps_start: FpsStartMode::Geometric,
        }
    }

    /// Smallest cloud the network accepts: the last layer's point count.
    /// Earlier layers sample at most as many points as they receive, so
    /// sparser clouds than the design size still run.
    pub fn input_points_min(&self) -> usize {
        self.layers.last().map_or(1, |l| l.points)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers.is_empty() {
            return bad("network needs at least one layer".into());
        }
        if self.layers[0].conv.in_channels != 3 {
            return bad("first layer must take 3 input channels (coordinates)".into());
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[1].points >= w[0].points {
                return bad(format!("point counts must strictly decrease, layer {} has {} after {}", i + 1, w[1].points, w[0].points));
            }
            if w[1].conv.in_channels != w[0].conv.out_channels {
                return bad(format!(
                    "layer {} takes {} channels but layer {i} produces {}",
                    i + 1,
                    w[1].conv.in_channels,
                    w[0].conv.out_channels
                ));
            }
        }
        for l in &self.layers {
            if l.points == 0 {
                return bad("layer point counts must be positive".into());
            }
            l.conv.validate()?;
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.task {
            Task::Classification => {}
            Task::Segmentation | Task::NormalEstimation => {
                if self.fp_widths.len() != self.layers.len() || self.fp_widths.contains(&0) {
                    return bad(format!("need one positive upsampling width per layer ({})", self.layers.len()));
                }
                if self.task == Task::NormalEstimation && (self.num_classes != 3 || self.onehot_classes != 0) {
                    return bad("normal estimation predicts 3 channels without a one-hot input".into());
                }
            }
        }
        Ok(())
    }
}

/// Sampled point sets and neighbourhoods of one cloud at every layer.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    /// `levels[0]` is the input cloud, `levels[l + 1]` the centroids of
    /// layer `l`.
    pub levels: Vec<PointCloud>,
    pub layers: Vec<LayerGeometry>,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<RSConvLayerParams>,
    pub head: Vec<Dense>,
    pub fp: Vec<Dense>,
}

fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, p: f64, rng: &mut Stream) -> Result<Var> {
    let n = tape.value(x).len();
    let keep = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?);
    Ok(tape.mul(x, m)?)
}

impl Network {
    pub fn build<T: Real>(config: NetworkConfig, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        for (i, l) in config.layers.iter().enumerate() {
            layers.push(RSConvLayerParams::register(store, &format!("layer{i}"), &l.conv)?);
        }
        let last = config.layers.last().expect("validated").conv.out_channels;
        let mut head = Vec::new();
        let mut fp = Vec::new();
        match config.task {
            Task::Classification => {
                let mut width = last;
                for (i, &w) in config.fc_widths.iter().enumerate() {
                    head.push(Dense::register(store, &format!("fc{i}"), width, w, true, true)?);
                    width = w;
                }
                head.push(Dense::register(store, &format!("fc{}", config.fc_widths.len()), width, config.num_classes, false, false)?);
            }
            Task::Segmentation | Task::NormalEstimation => {
                // Stage s upsamples from level L - s to level L - s - 1.
                let depth = config.layers.len();
                let mut coarse = last;
                for (s, &w) in config.fp_widths.iter().enumerate() {
                    let target = depth - s - 1;
                    let skip = if target == 0 {
                        3 + config.onehot_classes
                    } else {
                        config.layers[target - 1].conv.out_channels
                    };
                    fp.push(Dense::register(store, &format!("fp{s}"), coarse + skip, w, true, true)?);
                    coarse = w;
                }
                head.push(Dense::register(store, "head", coarse, config.num_classes, false, false)?);
            }
        }
        Ok(Self { config, layers, head, fp })
    }

    /// Samples and groups one cloud through every layer.
    pub fn prepare(&self, cloud: &PointCloud, rng: &mut Stream) -> Result<Hierarchy> {
        let min = self.config.input_points_min();
        if cloud.len() < min {
            return Err(Error::Invalid(format!(
                "cloud has {} points, the last layer samples {min}",
                cloud.len()
            )));
        }
        let mut levels = vec![cloud.clone()];
        let mut layers = Vec::with_capacity(self.config.layers.len());
        for spec in &self.config.layers {
            let current = levels.last().expect("non-empty");
            let start = match self.config.fps_start {
                FpsStartMode::Geometric => FpsStart::Geometric,
                FpsStartMode::First => FpsStart::Index(0),
                FpsStartMode::Random => FpsStart::Index(rng.random_range(0..current.len())),
            };
            let centroids = farthest_point_sample(&current.coords, spec.points.min(current.len()), start)?;
            let geom = prepare_layer(&spec.conv, current, &centroids, self.config.local_frames, rng)?;
            let next = current.select(&centroids);
            layers.push(geom);
            levels.push(next);
        }
        Ok(Hierarchy { levels, layers })
    }

    /// Prepares every cloud with its own stream `rng::stream(seed, [i])`.
    pub fn prepare_batch(&self, clouds: &[PointCloud], seed: u64, exec: Exec) -> Result<Vec<Hierarchy>> {
        exec.map_range(clouds.len(), |i| {
            let mut rng = crate::rng::stream(seed, &[i as u64]);
            self.prepare(&clouds[i], &mut rng)
        })
        .into_iter()
        .collect()
    }

    /// Runs the RS-Conv stack; returns the output of every layer.
    fn trunk<T: Real>(&self, tape: &mut Tape<T>, hs: &[&Hierarchy], training: bool, rng: &mut Stream) -> Result<Vec<Var>> {
        if hs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let mut outs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for (l, params) in self.layers.iter().enumerate() {
            let geoms: Vec<&LayerGeometry> = hs.iter().map(|h| &h.layers[l]).collect();
            let input = match outs.last() {
                None => LayerInput::LocalCoords,
                Some(&v) => LayerInput::Features(v),
            };
            let out = rs_conv_forward(tape, &self.config.layers[l].conv, params, input, &geoms, training, Some(&mut *rng))?;
            outs.push(out);
        }
        Ok(outs)
    }

    /// `B × K` logits.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, hs: &[&Hierarchy], training: bool, rng: &mut Stream) -> Result<Var> {
        if self.config.task != Task::Classification {
            return Err(Error::Invalid(format!("network is configured for {}", self.config.task)));
        }
        let outs = self.trunk(tape, hs, training, rng)?;
        let last = *outs.last().expect("non-empty");
        let spec = self.config.layers.last().expect("non-empty");
        let grouped = tape.reshape(last, &[hs.len(), spec.points, spec.conv.out_channels])?;
        let mut x = tape.reduce(ReduceKind::Max, grouped, 1)?;
        let n = self.head.len();
        for (i, d) in self.head.iter().enumerate() {
            x = d.forward(tape, x, training)?;
            if training && i + 1 < n && self.config.dropout > 0.0 {
                x = dropout(tape, x, self.config.dropout, rng)?;
            }
        }
        Ok(x)
    }

    /// Per-point outputs of the dense head, `Σ N_b × num_classes`, before
    /// any normalisation.
    fn dense<T: Real>(
        &self,
        tape: &mut Tape<T>,
        hs: &[&Hierarchy],
        onehot: Option<&[usize]>,
        training: bool,
        rng: &mut Stream,
    ) -> Result<Var> {
        let outs = self.trunk(tape, hs, training, rng)?;
        let depth = self.layers.len();
        let mut coarse = outs[depth - 1];
        for (s, mix) in self.fp.iter().enumerate() {
            let target = depth - s - 1;
            let skip = if target == 0 {
                self.level0_skip(tape, hs, onehot)?
            } else {
                outs[target - 1]
            };
            let fine: Vec<&[[f64; 3]]> = hs.iter().map(|h| h.levels[target].coords.as_slice()).collect();
            let coarse_pts: Vec<&[[f64; 3]]> = hs.iter().map(|h| h.levels[target + 1].coords.as_slice()).collect();
            coarse = feature_propagation(tape, &fine, &coarse_pts, coarse, Some(skip), mix, training)?;
        }
        self.head[0].forward(tape, coarse, training)
    }

    fn level0_skip<T: Real>(&self, tape: &mut Tape<T>, hs: &[&Hierarchy], onehot: Option<&[usize]>) -> Result<Var> {
        let k = self.config.onehot_classes;
        let labels = match (k, onehot) {
            (0, _) => None,
            (_, Some(l)) if l.len() == hs.len() => Some(l),
            (_, Some(l)) => {
                return Err(Error::Invalid(format!("{} one-hot labels for {} clouds", l.len(), hs.len())));
            }
            (_, None) => return Err(Error::Invalid("segmentation network expects shape labels for its one-hot input".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for (b, h) in hs.iter().enumerate() {
            for p in &h.levels[0].coords {
                data.extend(p.iter().map(|&v| T::lit(v)));
                if let Some(l) = labels {
                    if l[b] >= k {
                        return Err(Error::Invalid(format!("shape label {} outside {k} classes", l[b])));
                    }
                    data.extend((0..k).map(|c| if c == l[b] { T::one() } else { T::zero() }));
                }
                rows += 1;
            }
        }
        Ok(tape.constant(Tensor::new(vec![rows, 3 + k], data)?))
    }

    /// `Σ N_b × parts` logits.
    pub fn segment<T: Real>(
        &self,
        tape: &mut Tape<T>,
        hs: &[&Hierarchy],
        onehot: Option<&[usize]>,
        training: bool,
        rng: &mut Stream,
    ) -> Result<Var> {
        if self.config.task != Task::Segmentation {
            return Err(Error::Invalid(format!("network is configured for {}", self.config.task)));
        }
        self.dense(tape, hs, onehot, training, rng)
    }

    /// `Σ N_b × 3` unit normals.
    pub fn normals<T: Real>(&self, tape: &mut Tape<T>, hs: &[&Hierarchy], training: bool, rng: &mut Stream) -> Result<Var> {
        if self.config.task != Task::NormalEstimation {
            return Err(Error::Invalid(format!("network is configured for {}", self.config.task)));
        }
        let raw = self.dense(tape, hs, None, training, rng)?;
        Ok(tape.normalize_rows(raw)?)
    }
}

#[cfg(test)]
mod tests;
