//! ASCII point-cloud files.
//!
//! ```text
//! N F
//! x y z [nx ny nz] [label]
//! ...
//! [LABEL k]
//! ```
//! `F` is 3 (coordinates), 4 (+ point label), 6 (+ normals) or 7 (both).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{GeometryError, PointCloud, Vec3};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn parse_err(line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { line, msg: msg.into() }
}

/// Serialises with shortest round-trip decimals, so reading back is bit-exact.
pub fn to_string(cloud: &PointCloud) -> String {
    let fields = 3 + if cloud.normals.is_some() { 3 } else { 0 } + usize::from(cloud.point_labels.is_some());
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", cloud.len(), fields);
    for i in 0..cloud.len() {
        let [x, y, z] = cloud.coords[i];
        let _ = write!(s, "{x} {y} {z}");
        if let Some(ns) = &cloud.normals {
            let [a, b, c] = ns[i];
            let _ = write!(s, " {a} {b} {c}");
        }
        if let Some(ls) = &cloud.point_labels {
            let _ = write!(s, " {}", ls[i]);
        }
        s.push('\n');
    }
    if let Some(k) = cloud.shape_label {
        let _ = writeln!(s, "LABEL {k}");
    }
    s
}

pub fn parse(text: &str) -> Result<PointCloud, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let head: Vec<&str> = header.split_whitespace().collect();
    if head.len() != 2 {
        return Err(parse_err(1, format!("header must be `N F`, got `{header}`")));
    }
    let n: usize = head[0]
        .parse()
        .map_err(|_| parse_err(1, format!("bad point count `{}`", head[0])))?;
    let f: usize = head[1]
        .parse()
        .map_err(|_| parse_err(1, format!("bad field count `{}`", head[1])))?;
    if ![3, 4, 6, 7].contains(&f) {
        return Err(parse_err(1, format!("field count must be 3, 4, 6 or 7, got {f}")));
    }
    let has_normals = f >= 6;
    let has_labels = f == 4 || f == 7;

    let mut coords = Vec::with_capacity(n);
    let mut normals: Vec<Vec3> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(coords.len() + 2, format!("expected {n} points, found {}", coords.len())))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != f {
            return Err(parse_err(ln, format!("expected {f} fields, got {}", toks.len())));
        }
        let num = |k: usize| -> Result<f64, IoError> {
            let v: f64 = toks[k]
                .parse()
                .map_err(|_| parse_err(ln, format!("bad number `{}`", toks[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(ln, format!("non-finite value `{}`", toks[k])))
            }
        };
        coords.push([num(0)?, num(1)?, num(2)?]);
        if has_normals {
            normals.push([num(3)?, num(4)?, num(5)?]);
        }
        if has_labels {
            let t = toks[f - 1];
            labels.push(t.parse().map_err(|_| parse_err(ln, format!("bad label `{t}`")))?);
        }
    }
    let mut shape_label = None;
    for (ln, line) in lines {
        if line.is_empty() {
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["LABEL", k] if shape_label.is_none() => {
                shape_label = Some(k.parse().map_err(|_| parse_err(ln, format!("bad shape label `{k}`")))?);
            }
            _ => return Err(parse_err(ln, format!("unexpected trailing line `{line}`"))),
        }
    }
    Ok(PointCloud::new(
        coords,
        has_normals.then_some(normals),
        has_labels.then_some(labels),
        shape_label,
    )?)
}

pub fn read(path: &Path) -> Result<PointCloud, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse(&text)
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_atomic(path, to_string(cloud).as_bytes()).map_err(|source| IoError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
