//! Robustness harnesses: accuracy under rigid perturbations and under
//! sparser inputs.

use std::fmt;

use rand::seq::SliceRandom;

use super::run::{argmax, evaluate, predict_logits, Evaluation};
use crate::data::density_dropout;
use crate::geometry::{Mat3, PointCloud};
use crate::networks::{Network, Task};
use crate::rng;
use crate::tensor::{ParamStore, Real};
use crate::{Error, Exec, Result};

const PERMUTE_TAG: u64 = 0x9E2A;
const DENSITY_TAG: u64 = 0xD0E5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    Clean,
    /// Random reordering of the input points.
    Permute,
    /// The same offset added to every coordinate axis.
    Translate(f64),
    /// Counter-clockwise rotation about Y by a multiple of 90 degrees.
    RotateY(u32),
}

impl Perturbation {
    /// Clean, perm, ±0.2 translation, 90° and 180° rotation.
    pub const STANDARD: [Perturbation; 6] = [
        Perturbation::Clean,
        Perturbation::Permute,
        Perturbation::Translate(0.2),
        Perturbation::Translate(-0.2),
        Perturbation::RotateY(90),
        Perturbation::RotateY(180),
    ];

    /// Quarter turns are built from exact zeros and ones so that the
    /// rotated coordinates are plain swaps and negations.
    fn rotation(degrees: u32) -> Result<Mat3> {
        let (c, s) = match degrees % 360 {
            0 => (1.0, 0.0),
            90 => (0.0, 1.0),
            180 => (-1.0, 0.0),
            270 => (0.0, -1.0),
            d => return Err(Error::Invalid(format!("rotation must be a multiple of 90 degrees, got {d}"))),
        };
        Ok([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    /// `cloud` perturbed; `index` keys the permutation stream.
    pub fn apply(self, cloud: &PointCloud, index: usize, seed: u64) -> Result<PointCloud> {
        match self {
            Perturbation::Clean => Ok(cloud.clone()),
            Perturbation::Permute => {
                let mut order: Vec<usize> = (0..cloud.len()).collect();
                order.shuffle(&mut rng::stream(seed, &[PERMUTE_TAG, index as u64]));
                Ok(cloud.select(&order))
            }
            Perturbation::Translate(t) => Ok(cloud.translated([t, t, t])),
            Perturbation::RotateY(d) => {
                if !cloud.has_normals() {
                    return Err(Error::Invalid(format!(
                        "cloud {index} has no normals; rotation tests need normals"
                    )));
                }
                Ok(cloud.rigid_transform(&Self::rotation(d)?, [0.0; 3]))
            }
        }
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Perturbation::Clean => write!(f, "clean"),
            Perturbation::Permute => write!(f, "perm"),
            Perturbation::Translate(t) => write!(f, "translate{t:+}"),
            Perturbation::RotateY(d) => write!(f, "rotate_y{d}"),
        }
    }
}

/// One column of the invariance table.
#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceColumn {
    pub perturbation: Perturbation,
    pub accuracy: f64,
    /// Largest per-cloud `max|l - l_clean| / max|l_clean|` over the set.
    pub max_rel_logit_diff: f64,
    pub logits: Vec<Vec<f64>>,
}

/// Relative max-norm distance between two logit vectors.
pub fn relative_diff(a: &[f64], clean: &[f64]) -> f64 {
    let scale = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(clean).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Classification accuracy and logit drift under each perturbation.
/// Every perturbed copy is evaluated with the sampling streams of its
/// clean original.
pub fn invariance_harness<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    perturbations: &[Perturbation],
    seed: u64,
    exec: Exec,
) -> Result<Vec<InvarianceColumn>> {
    if network.config.task != Task::Classification {
        return Err(Error::Invalid("the invariance harness needs a classification network".into()));
    }
    if clouds.is_empty() {
        return Err(Error::Invalid("nothing to evaluate".into()));
    }
    let labels = clouds
        .iter()
        .enumerate()
        .map(|(i, c)| c.shape_label.ok_or_else(|| Error::Invalid(format!("cloud {i} has no shape label"))))
        .collect::<Result<Vec<_>>>()?;
    let clean = predict_logits(network, store, clouds, seed, exec)?;
    perturbations
        .iter()
        .map(|&p| {
            let copies = clouds
                .iter()
                .enumerate()
                .map(|(i, c)| p.apply(c, i, seed))
                .collect::<Result<Vec<_>>>()?;
            let logits = predict_logits(network, store, &copies, seed, exec)?;
            let hits = logits.iter().zip(&labels).filter(|(l, &y)| argmax(l) == y).count();
            let drift = logits.iter().zip(&clean).map(|(l, c)| relative_diff(l, c)).fold(0.0, f64::max);
            Ok(InvarianceColumn {
                perturbation: p,
                accuracy: hits as f64 / clouds.len() as f64,
                max_rel_logit_diff: drift,
                logits,
            })
        })
        .collect()
}

/// The table as CSV: a header of perturbation names, then an accuracy row
/// and a logit-drift row.
pub fn invariance_csv(columns: &[InvarianceColumn]) -> String {
    let mut out = String::from("metric");
    for c in columns {
        out.push_str(&format!(",{}", c.perturbation));
    }
    out.push_str("\naccuracy");
    for c in columns {
        out.push_str(&format!(",{}", c.accuracy));
    }
    out.push_str("\nmax_rel_logit_diff");
    for c in columns {
        out.push_str(&format!(",{:e}", c.max_rel_logit_diff));
    }
    out.push('\n');
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensityRow {
    pub points: usize,
    pub evaluation: Evaluation,
}

/// Evaluation after randomly keeping `count` points of every cloud, for
/// each count. A count equal to the cloud size keeps the cloud unchanged.
pub fn density_harness<T: Real>(
    network: &Network,
    store: &ParamStore<T>,
    clouds: &[PointCloud],
    counts: &[usize],
    seed: u64,
    exec: Exec,
    batch_size: usize,
) -> Result<Vec<DensityRow>> {
    counts
        .iter()
        .map(|&count| {
            let sparse = exec
                .map_range(clouds.len(), |i| {
                    let mut r = rng::stream(seed, &[DENSITY_TAG, count as u64, i as u64]);
                    density_dropout(&clouds[i], count, &mut r)
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            Ok(DensityRow {
                points: count,
                evaluation: evaluate(network, store, &sparse, seed, exec, batch_size)?,
            })
        })
        .collect()
}

pub fn density_csv(rows: &[DensityRow]) -> String {
    let mut out = String::from("points,loss,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.points, r.evaluation.loss, r.evaluation.accuracy));
    }
    out
}
