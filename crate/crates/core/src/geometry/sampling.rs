use std::cmp::Ordering;

use super::{dist2, lex_cmp, GeometryError, Result, Vec3};

/// How farthest-point sampling picks its first point and breaks ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpsStart {
    /// Start at the given index; ties go to the lowest index.
    Index(usize),
    /// Start at [`geometric_start`]; ties go to the lexicographically
    /// smallest coordinates. The selected point set is then independent of
    /// input order.
    Geometric,
}

/// The point farthest from the cloud's mean, ties broken by coordinates.
///
/// The mean is summed over per-axis sorted values so that it is bitwise
/// independent of point order.
pub fn geometric_start(coords: &[Vec3]) -> usize {
    let n = coords.len() as f64;
    let mut centre = [0.0; 3];
    for (axis, c) in centre.iter_mut().enumerate() {
        let mut vals: Vec<f64> = coords.iter().map(|p| p[axis]).collect();
        vals.sort_by(f64::total_cmp);
        *c = vals.iter().sum::<f64>() / n;
    }
    let mut best = 0;
    for i in 1..coords.len() {
        let (d, db) = (dist2(coords[i], centre), dist2(coords[best], centre));
        if d > db || (d == db && lex_cmp(&coords[i], &coords[best]) == Ordering::Less) {
            best = i;
        }
    }
    best
}

/// Greedy max-min subsampling of `count` indices.
pub fn farthest_point_sample(coords: &[Vec3], count: usize, start: FpsStart) -> Result<Vec<usize>> {
    let n = coords.len();
    if n == 0 {
        return Err(GeometryError::Empty);
    }
    if count == 0 || count > n {
        return Err(GeometryError::TooManySamples {
            requested: count,
            available: n,
        });
    }
    let (first, lexicographic) = match start {
        FpsStart::Index(i) if i >= n => return Err(GeometryError::Index { index: i, len: n }),
        FpsStart::Index(i) => (i, false),
        FpsStart::Geometric => (geometric_start(coords), true),
    };

    let mut selected = Vec::with_capacity(count);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    for _ in 0..count {
        selected.push(current);
        taken[current] = true;
        let c = coords[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            let d = dist2(coords[i], c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) if min_d[i] > min_d[b] => Some(i),
                Some(b)
                    if lexicographic
                        && min_d[i] == min_d[b]
                        && lex_cmp(&coords[i], &coords[b]) == Ordering::Less =>
                {
                    Some(i)
                }
                keep => keep,
            };
        }
        match best {
            Some(b) => current = b,
            None => break,
        }
    }
    Ok(selected)
}
