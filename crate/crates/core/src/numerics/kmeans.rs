//! Lloyd's k-means with deterministic seeding and tie-breaking.

use rand::seq::index;
use rand::Rng;

use super::matrix::squared_distance;
use super::rng::RngStream;
use crate::{Error, Result};

/// Default number of Lloyd iterations.
pub const DEFAULT_ITERS: usize = 10;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f32>>,
    /// Nearest centroid of every point under the final centroids.
    pub assignments: Vec<usize>,
    /// Objective (sum of squared distances) after each assignment step.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

/// Index of the nearest row in `centroids`; ties go to the lowest index.
pub fn nearest(point: &[f32], centroids: &[Vec<f32>]) -> (usize, f32) {
    let mut best = (0, f32::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn assign(points: &[Vec<f32>], centroids: &[Vec<f32>], out: &mut [usize]) -> f64 {
    let mut total = 0.0f64;
    for (p, slot) in points.iter().zip(out.iter_mut()) {
        let (i, d) = nearest(p, centroids);
        *slot = i;
        total += d as f64;
    }
    total
}

/// Clusters `points` into `k` groups.
///
/// Initial centroids are drawn without replacement from the distinct points.
/// When `k` exceeds the number of distinct points the remaining centroids are
/// copies of distinct points (cycled in order). A centroid that loses all its
/// points is re-seeded from a random point.
pub fn kmeans(
    points: &[Vec<f32>],
    k: usize,
    iters: usize,
    rng: &mut RngStream,
) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::invalid("k-means on an empty point set"));
    }
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    let dim = points[0].len();
    if let Some(i) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::dim(format!(
            "point {i} has dimension {}, expected {dim}",
            points[i].len()
        )));
    }

    let mut distinct: Vec<&Vec<f32>> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for p in points {
        let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            distinct.push(p);
        }
    }

    let mut centroids: Vec<Vec<f32>> = if k >= distinct.len() {
        (0..k).map(|i| distinct[i % distinct.len()].clone()).collect()
    } else {
        index::sample(rng, distinct.len(), k)
            .into_iter()
            .map(|i| distinct[i].clone())
            .collect()
    };

    let mut assignments = vec![0usize; points.len()];
    let mut history = Vec::with_capacity(iters + 1);
    let mut previous: Option<Vec<usize>> = None;
    for _ in 0..iters {
        history.push(assign(points, &centroids, &mut assignments));
        if previous.as_ref() == Some(&assignments) {
            break;
        }
        update(points, &assignments, &mut centroids, rng);
        previous = Some(assignments.clone());
    }
    history.push(assign(points, &centroids, &mut assignments));

    Ok(KMeansResult {
        centroids,
        assignments,
        objective_history: history,
    })
}

fn update(points: &[Vec<f32>], assignments: &[usize], centroids: &mut [Vec<f32>], rng: &mut RngStream) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0f64; dim]; centroids.len()];
    let mut counts = vec![0usize; centroids.len()];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += *v as f64;
        }
    }
    for (c, (sum, &count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
        if count == 0 {
            *c = points[rng.random_range(0..points.len())].clone();
        } else {
            for (ci, s) in c.iter_mut().zip(sum) {
                *ci = (s / count as f64) as f32;
            }
        }
    }
}
