//! Lloyd's k-means with greedy k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::Partition;

/// Row-major `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Points {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::Data(format!("{} values do not form a {n}x{d} matrix", data.len())));
        }
        Ok(Points { n, d, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Partition,
    /// Cluster index of every point, before compaction into a [`Partition`].
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub history: Vec<f64>,
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
pub fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Greedy k-means++: each new centre is the best, by resulting potential,
/// of `2 + floor(ln k)` candidates drawn proportionally to squared distance.
pub fn kmeans_plus_plus(points: &Points, k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.random_range(0..points.n);
    let mut centroids = vec![points.row(first).to_vec()];
    let mut closest: Vec<f64> = (0..points.n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let potential: f64 = closest.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if potential > 0.0 {
                let mut target = rng.random_range(0.0..potential);
                let mut pick = points.n - 1;
                for (i, &d) in closest.iter().enumerate() {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                pick
            } else {
                rng.random_range(0..points.n)
            };
            let updated: Vec<f64> = (0..points.n).map(|i| closest[i].min(sq_dist(points.row(i), points.row(cand)))).collect();
            let pot: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, updated));
            }
        }
        let (_, cand, updated) = best.expect("at least one trial");
        centroids.push(points.row(cand).to_vec());
        closest = updated;
    }
    centroids
}

fn assign(points: &Points, centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    (0..points.n).map(|i| nearest(points.row(i), centroids)).unzip()
}

/// Lloyd iterations from given initial centroids.
///
/// A cluster left empty is re-seeded at the point farthest from its own
/// centroid. Stops once no centroid moves by `tol` or more, or after
/// `max_iter` updates.
pub fn lloyd(points: &Points, mut centroids: Vec<Vec<f64>>, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    let k = centroids.len();
    let mut history = Vec::new();
    let mut iterations = 0;
    let (mut labels, mut dists) = assign(points, &centroids);
    history.push(dists.iter().sum());
    while iterations < max_iter {
        iterations += 1;
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..points.n)
                    .filter(|&i| counts[labels[i]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .ok_or_else(|| Error::Data("cannot re-seed an empty cluster".into()))?;
                counts[labels[far]] -= 1;
                counts[j] = 1;
                labels[far] = j;
                dists[far] = 0.0;
                centroids[j] = points.row(far).to_vec();
            }
        }
        let mut sums = vec![vec![0.0; points.d]; k];
        for (i, &l) in labels.iter().enumerate() {
            sums[l].iter_mut().zip(points.row(i)).for_each(|(s, &x)| *s += x);
        }
        let mut shift = 0.0f64;
        for (j, s) in sums.into_iter().enumerate() {
            let c: Vec<f64> = s.into_iter().map(|v| v / counts[j] as f64).collect();
            shift = shift.max(sq_dist(&c, &centroids[j]).sqrt());
            centroids[j] = c;
        }
        (labels, dists) = assign(points, &centroids);
        history.push(dists.iter().sum());
        if shift < tol {
            break;
        }
    }
    let inertia = *history.last().unwrap();
    Ok(KMeansResult { assignments: Partition::new(&labels)?, labels, centroids, inertia, iterations, history })
}

pub fn kmeans(points: &Points, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeansResult> {
    if k == 0 || points.d == 0 || points.n < k {
        return Err(Error::Data(format!("k-means needs n >= k >= 1 and d >= 1, got n={} k={k} d={}", points.n, points.d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = kmeans_plus_plus(points, k, &mut rng);
    lloyd(points, init, max_iter, tol)
}

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pairs() {
        let pts = Points::new(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let r = kmeans(&pts, 2, 0, 100, 1e-10).unwrap();
        assert_eq!(r.labels[0], r.labels[1]);
        assert_eq!(r.labels[2], r.labels[3]);
        assert_ne!(r.labels[0], r.labels[2]);
        assert!((r.inertia - 0.01).abs() < 1e-12);
    }

    #[test]
    fn one_point_per_centroid() {
        let pts = Points::new(5, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 7.0, 7.0, -2.0, 5.0]).unwrap();
        assert_eq!(kmeans(&pts, 5, 11, 50, 1e-10).unwrap().inertia, 0.0);
    }

    #[test]
    fn rejects_too_few_points() {
        let pts = Points::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(kmeans(&pts, 3, 0, 10, 1e-6).is_err());
    }

    #[test]
    fn more_clusters_than_distinct_points() {
        // Coincident centroids tie, so the higher-index one stays empty.
        let pts = Points::new(4, 1, vec![1.0, 1.0, 1.0, 5.0]).unwrap();
        let r = kmeans(&pts, 3, 2, 20, 1e-9).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.assignments.k(), 2);
    }
}
