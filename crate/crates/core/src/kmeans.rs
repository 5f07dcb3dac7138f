//! Lloyd's algorithm with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 32,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment pass, in order.
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn count_distinct(points: &[f64], dim: usize, limit: usize) -> usize {
    let mut distinct: Vec<&[f64]> = Vec::new();
    for p in points.chunks_exact(dim) {
        if !distinct.contains(&p) {
            distinct.push(p);
            if distinct.len() >= limit {
                break;
            }
        }
    }
    distinct.len()
}

/// D²-weighted seeding. Points already chosen have weight zero, so the
/// seeds are distinct whenever at least `k` distinct points exist.
fn plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = i;
                break;
            }
            target -= w;
        }
        // numerical fall-through: take the last point with weight
        if d2[pick] == 0.0 {
            pick = d2.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
        }
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (i, p) in points.chunks_exact(dim).enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `points` (`n × dim`, row-major) into `params.k` groups.
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<KMeansFit> {
    let k = params.k;
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::KMeans(format!("{} values do not form rows of {dim}", points.len())));
    }
    if k < 2 {
        return Err(Error::KMeans(format!("k must be at least 2, got {k}")));
    }
    let n = points.len() / dim;
    if n < k {
        return Err(Error::KMeans(format!("{n} points is fewer than k = {k}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::KMeans("non-finite input".into()));
    }
    let distinct = count_distinct(points, dim, k);
    if distinct < k {
        return Err(Error::KMeans(format!("only {distinct} distinct points for k = {k}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let init = plus_plus(points, dim, k, &mut rng);
    Ok(lloyd(points, dim, init, params.max_iter, params.tol))
}

/// Lloyd iterations from given initial centroids.
pub(crate) fn lloyd(points: &[f64], dim: usize, init: Vec<f64>, max_iter: usize, tol: f64) -> KMeansFit {
    let k = init.len() / dim;
    let n = points.len() / dim;
    let mut centroids = init;
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let mut inertia = 0.0;
        for (i, p) in points.chunks_exact(dim).enumerate() {
            let (j, d) = nearest(p, &centroids, dim);
            assign[i] = j;
            dist[i] = d;
            inertia += d;
        }
        if let Some(&prev) = history.last() {
            debug_assert!(inertia <= prev * (1.0 + 1e-12) + 1e-300, "inertia rose: {prev} -> {inertia}");
        }
        history.push(inertia);
        if iterations == max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, p) in points.chunks_exact(dim).enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i] * dim..(assign[i] + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        let mut taken = vec![false; n];
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in next[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..]) {
                    *c = s / counts[j] as f64;
                }
            } else {
                // empty cluster: move it onto the point worst served by its centroid
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                dist[far] = 0.0;
                next[j * dim..(j + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            // one more assignment pass records the inertia of the final centroids
            let inertia: f64 = points.chunks_exact(dim).map(|p| nearest(p, &centroids, dim).1).sum();
            history.push(inertia);
            break;
        }
    }

    KMeansFit {
        inertia: *history.last().expect("at least one pass"),
        centroids,
        dim,
        iterations,
        history,
    }
}
