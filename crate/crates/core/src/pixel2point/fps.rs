//! Greedy farthest point sampling on 2-D pixel coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How the first point of the greedy sequence is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsStart {
    /// The point nearest the centroid (lowest index on ties).
    NearestCentroid,
    /// A uniformly drawn point.
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FpsSelection {
    /// Exactly `m` indices into the input.
    pub indices: Vec<usize>,
    /// Trailing entries that repeat earlier picks because the input had fewer than `m` points.
    pub padded: usize,
}

#[inline]
pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

/// Index of the first point of the sequence.
pub fn start_index(points: &[[f64; 2]], start: FpsStart) -> Result<usize> {
    if points.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok(match start {
        FpsStart::NearestCentroid => {
            let n = points.len() as f64;
            let c = points.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
            let c = [c[0] / n, c[1] / n];
            let mut best = 0;
            for (i, &p) in points.iter().enumerate().skip(1) {
                if dist2(p, c) < dist2(points[best], c) {
                    best = i;
                }
            }
            best
        }
        FpsStart::Seeded(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..points.len()),
    })
}

/// Selects `m` points greedily: after the start point, each pick maximizes the
/// minimum Euclidean distance to the points already picked; ties go to the
/// lowest index. With fewer than `m` inputs, every point is picked once and
/// the sequence is then repeated cyclically.
pub fn fps(points: &[[f64; 2]], m: usize, start: FpsStart) -> Result<FpsSelection> {
    if m == 0 {
        return Err(Error::Contract("fps target count must be at least 1".into()));
    }
    let first = start_index(points, start)?;
    let n = points.len();
    let take = m.min(n);
    let mut indices = Vec::with_capacity(m);
    let mut chosen = vec![false; n];
    let mut min_d2: Vec<f64> = points.iter().map(|&p| dist2(p, points[first])).collect();
    indices.push(first);
    chosen[first] = true;
    while indices.len() < take {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d2.iter().enumerate() {
            if !chosen[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        indices.push(best);
        chosen[best] = true;
        let pb = points[best];
        for (d, &p) in min_d2.iter_mut().zip(points) {
            let nd = dist2(p, pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    let padded = m - take;
    for i in 0..padded {
        indices.push(indices[i % take]);
    }
    Ok(FpsSelection { indices, padded })
}

/// Largest distance from any input point to its nearest selected point.
pub fn coverage_radius(points: &[[f64; 2]], selected: &[usize]) -> f64 {
    points
        .iter()
        .map(|&p| selected.iter().map(|&s| dist2(p, points[s])).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
        .sqrt()
}

/// Brute-force reference: recomputes every candidate's distance to the whole
/// selected set at each step. `O(n·m²)`; for cross-checking [`fps`].
pub fn fps_reference(points: &[[f64; 2]], m: usize, first: usize) -> Vec<usize> {
    let mut selected = vec![first];
    while selected.len() < m.min(points.len()) {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in points.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            let d = selected.iter().map(|&s| dist2(p, points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        selected.push(best.expect("an unselected point remains").0);
    }
    selected
}
