use rand::seq::index::sample;
use rand::Rng;

use crate::geometry::{normalized, PointCloud};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    pub aniso_scale_low: f64,
    pub aniso_scale_high: f64,
    pub translation_range: f64,
    /// Largest fraction of points replaced by random input dropout.
    pub input_dropout: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            aniso_scale_low: 0.66,
            aniso_scale_high: 1.5,
            translation_range: 0.2,
            input_dropout: 0.0,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            aniso_scale_low: 1.0,
            aniso_scale_high: 1.0,
            translation_range: 0.0,
            input_dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.aniso_scale_low > 0.0 && self.aniso_scale_low <= self.aniso_scale_high && self.aniso_scale_high.is_finite()) {
            return Err(Error::Config(format!(
                "scale range [{}, {}] must be positive and ordered",
                self.aniso_scale_low, self.aniso_scale_high
            )));
        }
        if !(self.translation_range >= 0.0 && self.translation_range.is_finite()) {
            return Err(Error::Config(format!("translation range {} must be non-negative", self.translation_range)));
        }
        if !(0.0..1.0).contains(&self.input_dropout) {
            return Err(Error::Config(format!("input dropout {} outside [0, 1)", self.input_dropout)));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Random per-axis scaling then translation. Normals follow the inverse
/// transpose of the scaling and are renormalised.
pub fn augment<R: Rng + ?Sized>(cloud: &PointCloud, config: &AugmentationConfig, rng: &mut R) -> PointCloud {
    let s: [f64; 3] = std::array::from_fn(|_| uniform(rng, config.aniso_scale_low, config.aniso_scale_high));
    let t = config.translation_range;
    let shift: [f64; 3] = std::array::from_fn(|_| uniform(rng, -t, t));
    PointCloud {
        coords: cloud
            .coords
            .iter()
            .map(|p| std::array::from_fn(|a| p[a] * s[a] + shift[a]))
            .collect(),
        normals: match &cloud.normals {
            // Uniform scaling leaves directions alone; skip the round-off.
            Some(ns) if s[0] != s[1] || s[1] != s[2] => {
                Some(ns.iter().map(|n| normalized(std::array::from_fn(|a| n[a] / s[a]))).collect())
            }
            other => other.clone(),
        },
        ..cloud.clone()
    }
}

/// Random input dropout: draws a ratio in `[0, max_ratio]`, then overwrites
/// each point with that probability by a copy of the first point. The point
/// count is unchanged, so batches stay rectangular.
pub fn input_dropout<R: Rng + ?Sized>(cloud: &PointCloud, max_ratio: f64, rng: &mut R) -> PointCloud {
    if max_ratio <= 0.0 {
        return cloud.clone();
    }
    let ratio = rng.random_range(0.0..=max_ratio);
    let keep: Vec<usize> = (0..cloud.len())
        .map(|i| if rng.random::<f64>() < ratio { 0 } else { i })
        .collect();
    cloud.select(&keep)
}

/// Uniform subsample of `keep` points without replacement, in ascending
/// index order.
pub fn density_dropout<R: Rng + ?Sized>(cloud: &PointCloud, keep: usize, rng: &mut R) -> Result<PointCloud> {
    if keep == 0 || keep > cloud.len() {
        return Err(Error::Invalid(format!("cannot keep {keep} of {} points", cloud.len())));
    }
    let mut idx = sample(rng, cloud.len(), keep).into_vec();
    idx.sort_unstable();
    Ok(cloud.select(&idx))
}
