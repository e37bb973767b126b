//! `key = value` run configuration.
//!
//! Every key is optional; missing keys take the defaults of the task's
//! preset. Per-layer values are separated by `|`, list items by `,`:
//!
//! ```text
//! task = classification
//! radii = 0.2,0.3,0.45 | 0.4,0.6,0.9 | 4
//! neighbors = 8,12,16 | 8,12,16 | 16
//! ```

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::optim::Schedule;
use super::run::TrainOptions;
use crate::conv::{Aggregation, RSConvLayerConfig, ScaleFusion};
use crate::data::{AugmentationConfig, DatasetSpec};
use crate::geometry::{CentroidMode, NeighborMode, RelationKind, ScaleSpec};
use crate::networks::{FpsStartMode, LayerSpec, NetworkConfig, Task};
use crate::{Error, Exec, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub task: Task,
    pub layer_points: Vec<usize>,
    pub layer_channels: Vec<usize>,
    pub radii: Vec<Vec<f64>>,
    pub neighbors: Vec<Vec<usize>>,
    /// `None` keeps the default widths for the layer's input width.
    pub relation_widths: Vec<Option<Vec<usize>>>,
    pub relation: RelationKind,
    pub aggregation: Aggregation,
    pub scale_fusion: ScaleFusion,
    pub neighbor_mode: NeighborMode,
    pub centroid_mode: CentroidMode,
    pub relation_cut: f64,
    pub local_frames: bool,
    pub fps_start: FpsStartMode,
    pub fc_widths: Vec<usize>,
    pub dropout: f64,
    pub fp_widths: Vec<usize>,
    pub num_classes: usize,
    pub onehot: bool,

    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub parallel: bool,
    pub schedule: Schedule,
    pub augmentation: AugmentationConfig,

    pub families: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub data_seed: u64,
}

const KEYS: &[&str] = &[
    "task",
    "layer_points",
    "layer_channels",
    "radii",
    "neighbors",
    "relation_widths",
    "relation",
    "aggregation",
    "scale_fusion",
    "neighbor_mode",
    "centroid_mode",
    "relation_cut",
    "local_frames",
    "fps_start",
    "fc_widths",
    "dropout",
    "fp_widths",
    "num_classes",
    "onehot",
    "epochs",
    "batch_size",
    "eval_every",
    "parallel",
    "lr_init",
    "lr_decay",
    "lr_every",
    "bn_momentum_init",
    "bn_decay",
    "bn_every",
    "bn_floor",
    "scale_low",
    "scale_high",
    "translation",
    "input_dropout",
    "families",
    "train_per_class",
    "test_per_class",
    "points",
    "data_seed",
];

fn parse_one<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{}`", v.trim())))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    let v = v.trim();
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_one(key, x)).collect()
}

fn parse_layers<T: FromStr>(key: &str, v: &str) -> Result<Vec<Vec<T>>> {
    v.split('|').map(|x| parse_list(key, x)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("`{key}`: expected true or false, got `{other}`"))),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    if xs.is_empty() {
        return "none".into();
    }
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_layers<T: Display>(xs: &[Vec<T>]) -> String {
    xs.iter().map(|l| join(l)).collect::<Vec<_>>().join(" | ")
}

impl Config {
    /// Defaults for `task`: the desk classifier, segmenter or normal
    /// regressor with their synthetic datasets.
    pub fn preset(task: Task) -> Self {
        let network = match task {
            Task::Classification => NetworkConfig::desk_classifier(4, RelationKind::Full),
            Task::Segmentation => NetworkConfig::desk_segmenter(task, 2, 2),
            Task::NormalEstimation => NetworkConfig::desk_segmenter(task, 3, 0),
        };
        let data = match task {
            Task::Classification => DatasetSpec::desk(1),
            Task::Segmentation => DatasetSpec {
                families: vec!["cylinder".into(), "cone".into()],
                train_per_class: 100,
                test_per_class: 25,
                ..DatasetSpec::desk(1)
            },
            Task::NormalEstimation => DatasetSpec {
                families: vec!["sphere".into(), "cylinder".into()],
                train_per_class: 100,
                test_per_class: 25,
                ..DatasetSpec::desk(1)
            },
        };
        let mut c = Self::from_parts(&network, &TrainOptions::default(), &data);
        c.epochs = 40;
        c
    }

    /// Flattens a network, training options and dataset into a config.
    /// Layer-wide settings are taken from the first layer.
    pub fn from_parts(network: &NetworkConfig, opts: &TrainOptions, data: &DatasetSpec) -> Self {
        let first = &network.layers[0].conv;
        Self {
            task: network.task,
            layer_points: network.layers.iter().map(|l| l.points).collect(),
            layer_channels: network.layers.iter().map(|l| l.conv.out_channels).collect(),
            radii: network.layers.iter().map(|l| l.conv.scales.iter().map(|s| s.radius).collect()).collect(),
            neighbors: network.layers.iter().map(|l| l.conv.scales.iter().map(|s| s.k).collect()).collect(),
            relation_widths: network
                .layers
                .iter()
                .map(|l| {
                    let default = RSConvLayerConfig::default_relation_widths(l.conv.in_channels);
                    (l.conv.relation_mlp_widths != default).then(|| l.conv.relation_mlp_widths.clone())
                })
                .collect(),
            relation: first.relation_kind,
            aggregation: first.aggregation,
            scale_fusion: first.scale_fusion,
            neighbor_mode: first.neighbor_mode,
            centroid_mode: first.centroid_mode,
            relation_cut: first.relation_cut_ratio,
            local_frames: network.local_frames,
            fps_start: network.fps_start,
            fc_widths: network.fc_widths.clone(),
            dropout: network.dropout,
            fp_widths: network.fp_widths.clone(),
            num_classes: network.num_classes,
            onehot: network.onehot_classes > 0,
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            eval_every: opts.eval_every,
            parallel: opts.exec == Exec::Parallel,
            schedule: opts.schedule,
            augmentation: opts.augmentation,
            families: data.families.clone(),
            train_per_class: data.train_per_class,
            test_per_class: data.test_per_class,
            points: data.points,
            data_seed: data.seed,
        }
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let depth = self.layer_points.len();
        let lens = [
            ("layer_channels", self.layer_channels.len()),
            ("radii", self.radii.len()),
            ("neighbors", self.neighbors.len()),
            ("relation_widths", self.relation_widths.len()),
        ];
        for (key, len) in lens {
            if len != depth {
                return Err(Error::Config(format!("`{key}` lists {len} layers, `layer_points` lists {depth}")));
            }
        }
        let mut layers = Vec::with_capacity(depth);
        let mut in_channels = 3;
        for l in 0..depth {
            if self.radii[l].len() != self.neighbors[l].len() {
                return Err(Error::Config(format!("layer {l}: {} radii but {} neighbour counts", self.radii[l].len(), self.neighbors[l].len())));
            }
            let scales = self.radii[l]
                .iter()
                .zip(&self.neighbors[l])
                .map(|(&radius, &k)| ScaleSpec { radius, k })
                .collect();
            let mut conv = RSConvLayerConfig::new(in_channels, self.layer_channels[l], self.relation, scales);
            if let Some(w) = &self.relation_widths[l] {
                conv.relation_mlp_widths = w.clone();
            }
            conv.aggregation = self.aggregation;
            conv.scale_fusion = self.scale_fusion;
            conv.neighbor_mode = self.neighbor_mode;
            conv.centroid_mode = self.centroid_mode;
            conv.relation_cut_ratio = self.relation_cut;
            in_channels = conv.out_channels;
            layers.push(LayerSpec {
                points: self.layer_points[l],
                conv,
            });
        }
        let onehot_classes = if self.onehot { self.families.len() } else { 0 };
        let net = NetworkConfig {
            task: self.task,
            layers,
            fc_widths: self.fc_widths.clone(),
            dropout: self.dropout,
            fp_widths: self.fp_widths.clone(),
            num_classes: self.num_classes,
            onehot_classes,
            local_frames: self.local_frames,
            fps_start: self.fps_start,
        };
        net.validate()?;
        Ok(net)
    }

    pub fn train_options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            schedule: self.schedule,
            augmentation: self.augmentation,
            seed,
            exec: if self.parallel { Exec::Parallel } else { Exec::Sequential },
            eval_every: self.eval_every,
        }
    }

    pub fn dataset(&self) -> DatasetSpec {
        DatasetSpec {
            families: self.families.clone(),
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
            points: self.points,
            seed: self.data_seed,
        }
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        let net = self.network()?;
        self.schedule.validate()?;
        self.augmentation.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 (batch normalisation)".into()));
        }
        if self.families.is_empty() {
            return Err(Error::Config("families must name at least one shape family".into()));
        }
        if self.task == Task::Classification && self.num_classes != self.families.len() {
            return Err(Error::Config(format!(
                "num_classes is {} but {} families are listed",
                self.num_classes,
                self.families.len()
            )));
        }
        if self.points < net.input_points_min() {
            return Err(Error::Config(format!("points = {} is below the last layer's {}", self.points, net.input_points_min())));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
            }
            if pairs.insert(k.to_string(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
        }
        let task = match pairs.get("task") {
            Some((_, v)) => v.parse()?,
            None => Task::Classification,
        };
        let mut c = Self::preset(task);
        for (k, (line, v)) in &pairs {
            c.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {line}: {m}")),
                other => Error::Config(format!("line {line}: {other}")),
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => {}
            "layer_points" => self.layer_points = parse_list(key, v)?,
            "layer_channels" => self.layer_channels = parse_list(key, v)?,
            "radii" => self.radii = parse_layers(key, v)?,
            "neighbors" => self.neighbors = parse_layers(key, v)?,
            "relation_widths" => {
                self.relation_widths = v
                    .split('|')
                    .map(|l| match l.trim() {
                        "default" => Ok(None),
                        other => parse_list(key, other).map(Some),
                    })
                    .collect::<Result<_>>()?
            }
            "relation" => self.relation = v.parse()?,
            "aggregation" => self.aggregation = v.parse()?,
            "scale_fusion" => self.scale_fusion = v.parse()?,
            "neighbor_mode" => self.neighbor_mode = v.parse()?,
            "centroid_mode" => self.centroid_mode = v.parse()?,
            "relation_cut" => self.relation_cut = parse_one(key, v)?,
            "local_frames" => self.local_frames = parse_bool(key, v)?,
            "fps_start" => self.fps_start = v.parse()?,
            "fc_widths" => self.fc_widths = parse_list(key, v)?,
            "dropout" => self.dropout = parse_one(key, v)?,
            "fp_widths" => self.fp_widths = parse_list(key, v)?,
            "num_classes" => self.num_classes = parse_one(key, v)?,
            "onehot" => self.onehot = parse_bool(key, v)?,
            "epochs" => self.epochs = parse_one(key, v)?,
            "batch_size" => self.batch_size = parse_one(key, v)?,
            "eval_every" => self.eval_every = parse_one(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "lr_init" => self.schedule.lr_init = parse_one(key, v)?,
            "lr_decay" => self.schedule.lr_decay = parse_one(key, v)?,
            "lr_every" => self.schedule.lr_every = parse_one(key, v)?,
            "bn_momentum_init" => self.schedule.bn_momentum_init = parse_one(key, v)?,
            "bn_decay" => self.schedule.bn_decay = parse_one(key, v)?,
            "bn_every" => self.schedule.bn_every = parse_one(key, v)?,
            "bn_floor" => self.schedule.bn_floor = parse_one(key, v)?,
            "scale_low" => self.augmentation.aniso_scale_low = parse_one(key, v)?,
            "scale_high" => self.augmentation.aniso_scale_high = parse_one(key, v)?,
            "translation" => self.augmentation.translation_range = parse_one(key, v)?,
            "input_dropout" => self.augmentation.input_dropout = parse_one(key, v)?,
            "families" => self.families = parse_list(key, v)?,
            "train_per_class" => self.train_per_class = parse_one(key, v)?,
            "test_per_class" => self.test_per_class = parse_one(key, v)?,
            "points" => self.points = parse_one(key, v)?,
            "data_seed" => self.data_seed = parse_one(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text: every key, in a fixed order. Parsing it gives back
    /// an equal config.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self
            .relation_widths
            .iter()
            .map(|w| w.as_ref().map_or("default".to_string(), |w| join(w)))
            .collect();
        let s = &self.schedule;
        let a = &self.augmentation;
        let entries: Vec<(&str, String)> = vec![
            ("task", self.task.to_string()),
            ("layer_points", join(&self.layer_points)),
            ("layer_channels", join(&self.layer_channels)),
            ("radii", join_layers(&self.radii)),
            ("neighbors", join_layers(&self.neighbors)),
            ("relation_widths", widths.join(" | ")),
            ("relation", self.relation.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("scale_fusion", self.scale_fusion.to_string()),
            ("neighbor_mode", self.neighbor_mode.name().to_string()),
            ("centroid_mode", self.centroid_mode.name().to_string()),
            ("relation_cut", self.relation_cut.to_string()),
            ("local_frames", self.local_frames.to_string()),
            ("fps_start", self.fps_start.to_string()),
            ("fc_widths", join(&self.fc_widths)),
            ("dropout", self.dropout.to_string()),
            ("fp_widths", join(&self.fp_widths)),
            ("num_classes", self.num_classes.to_string()),
            ("onehot", self.onehot.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("parallel", self.parallel.to_string()),
            ("lr_init", s.lr_init.to_string()),
            ("lr_decay", s.lr_decay.to_string()),
            ("lr_every", s.lr_every.to_string()),
            ("bn_momentum_init", s.bn_momentum_init.to_string()),
            ("bn_decay", s.bn_decay.to_string()),
            ("bn_every", s.bn_every.to_string()),
            ("bn_floor", s.bn_floor.to_string()),
            ("scale_low", a.aniso_scale_low.to_string()),
            ("scale_high", a.aniso_scale_high.to_string()),
            ("translation", a.translation_range.to_string()),
            ("input_dropout", a.input_dropout.to_string()),
            ("families", join(&self.families)),
            ("train_per_class", self.train_per_class.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("points", self.points.to_string()),
            ("data_seed", self.data_seed.to_string()),
        ];
        debug_assert_eq!(entries.len(), KEYS.len());
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
