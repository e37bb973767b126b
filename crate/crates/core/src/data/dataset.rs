use std::path::{Path, PathBuf};

use crate::exec::Exec;
use crate::geometry::{io, PointCloud};
use crate::rng;
use crate::{Error, Result};

use super::shapes::{generate, Family, ShapeSpec};

pub const MANIFEST_HEADER: &str = "RSCNN-MANIFEST v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A labelled synthetic benchmark; class `i` is `families[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub families: Vec<String>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub seed: u64,
}

impl DatasetSpec {
    /// Four classes, 200 train and 50 test shapes each, 256 points.
    pub fn desk(seed: u64) -> Self {
        Self {
            families: ["sphere", "cube", "cylinder", "cone"].map(String::from).to_vec(),
            train_per_class: 200,
            test_per_class: 50,
            points: 256,
            seed,
        }
    }

    /// One shape. Train and test draw from disjoint stream paths.
    pub fn sample(&self, split: Split, class: usize, index: usize) -> Result<PointCloud> {
        let name = self
            .families
            .get(class)
            .ok_or_else(|| Error::Invalid(format!("class {class} out of range")))?;
        let tag = match split {
            Split::Train => 0,
            Split::Test => 1,
        };
        let path = [tag, class as u64, index as u64];
        let mut sizes = rng::stream(self.seed, &[path[0], path[1], path[2], 0]);
        let family = Family::random(name, &mut sizes)?;
        let spec = ShapeSpec {
            family,
            points: self.points,
            seed: rng::derive_seed(self.seed, &[path[0], path[1], path[2], 1]),
        };
        let mut cloud = generate(&spec)?.normalize_global();
        cloud.shape_label = Some(class);
        Ok(cloud)
    }
}

/// Every shape of a split, class-major.
pub fn generate_dataset(spec: &DatasetSpec, split: Split, exec: Exec) -> Result<Vec<PointCloud>> {
    let per = match split {
        Split::Train => spec.train_per_class,
        Split::Test => spec.test_per_class,
    };
    exec.map_range(spec.families.len() * per, |i| spec.sample(split, i / per, i % per))
        .into_iter()
        .collect()
}

/// Writes `clouds` as `dir/{stem}_{i}.pts` plus `dir/{stem}.manifest`;
/// returns the manifest path.
pub fn write_dataset(dir: &Path, stem: &str, clouds: &[PointCloud]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let label = c
            .shape_label
            .ok_or_else(|| Error::Invalid(format!("cloud {i} has no shape label")))?;
        let name = format!("{stem}_{i:05}.pts");
        io::write(&dir.join(&name), c)?;
        entries.push((PathBuf::from(name), label));
    }
    let manifest = dir.join(format!("{stem}.manifest"));
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, entries: &[(PathBuf, usize)]) -> Result<()> {
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (p, label) in entries {
        let s = p.to_string_lossy();
        if s.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("manifest paths cannot contain whitespace: `{s}`")));
        }
        text.push_str(&format!("{s} {label}\n"));
    }
    io::write_atomic(path, text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads every cloud listed in a manifest. Relative paths resolve against
/// the manifest's directory; the manifest label overrides any label in the
/// file.
pub fn read_manifest(path: &Path) -> Result<Vec<PointCloud>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::Invalid(format!("{}: missing `{MANIFEST_HEADER}` header", path.display()))),
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in lines {
        let bad = |m: &str| Error::Invalid(format!("{}:{}: {m}", path.display(), n + 1));
        let mut parts = line.split_whitespace();
        let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `path label`"));
        };
        let label: usize = label.parse().map_err(|_| bad("label is not a non-negative integer"))?;
        let mut cloud = io::read(&base.join(file))?;
        cloud.shape_label = Some(label);
        out.push(cloud);
    }
    if out.is_empty() {
        return Err(Error::Invalid(format!("{}: manifest lists no clouds", path.display())));
    }
    Ok(out)
}
