//! Lloyd's K-Means with k-means++ seeding (Eq. 6: minimizing within-class
//! variance). All arithmetic in f64; fully deterministic per seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct KMeansResult {
    /// Cluster index per point.
    pub assignments: Vec<usize>,
    /// k × dim centroids, row-major.
    pub centroids: Vec<f64>,
    /// Sum of squared distances to assigned centroids.
    pub objective: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[f64], k: usize, dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..k {
        let d = sq_dist(point, &centroids[c * dim..(c + 1) * dim]);
        // strict < keeps ties on the lowest cluster index
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeanspp_seed(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(&points[i * dim..(i + 1) * dim], &centroids[0..dim]))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // all remaining points coincide with chosen centroids
            rng.random_range(0..n)
        };
        centroids.extend_from_slice(&points[pick * dim..(pick + 1) * dim]);
        for i in 0..n {
            let d = sq_dist(
                &points[i * dim..(i + 1) * dim],
                &centroids[c * dim..(c + 1) * dim],
            );
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

/// One seeded K-Means run. The objective is asserted nonincreasing across
/// iterations (an Eq. 6 invariant, checked in-loop).
pub fn kmeans(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "point array length {} not divisible by dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::InvalidArgument(format!(
            "kmeans needs #points >= K >= 1, got n={n}, K={k}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_seed(points, n, dim, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut prev_obj = f64::INFINITY;
    let mut iterations = 0;
    loop {
        // assignment step
        let mut obj = 0.0;
        for i in 0..n {
            let (c, d) = nearest(&points[i * dim..(i + 1) * dim], &centroids, k, dim);
            assignments[i] = c;
            obj += d;
        }
        assert!(
            obj <= prev_obj * (1.0 + 1e-12) + 1e-12,
            "kmeans objective increased: {prev_obj} -> {obj}"
        );
        if prev_obj - obj <= tol || iterations >= max_iter {
            return Ok(KMeansResult {
                assignments,
                centroids,
                objective: obj,
                iterations,
            });
        }
        prev_obj = obj;
        iterations += 1;
        // update step
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for d in 0..dim {
                sums[c * dim + d] += points[i * dim + d];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            } else {
                // empty cluster: reseed to the point farthest from its
                // assigned centroid; if every distance is zero the points
                // cannot be split further and the cluster stays put
                let mut far_i = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d = sq_dist(
                        &points[i * dim..(i + 1) * dim],
                        &centroids[assignments[i] * dim..(assignments[i] + 1) * dim],
                    );
                    if d > far_d {
                        far_d = d;
                        far_i = i;
                    }
                }
                if far_d > 0.0 {
                    let src = far_i * dim;
                    let dst = c * dim;
                    for d in 0..dim {
                        centroids[dst + d] = points[src + d];
                    }
                }
            }
        }
    }
}

/// Best of `restarts` runs with derived seeds; ties keep the earliest run.
pub fn kmeans_restarts(
    points: &[f64],
    dim: usize,
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    restarts: usize,
) -> Result<KMeansResult> {
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be >= 1".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts {
        let run = kmeans(points, dim, k, seed.wrapping_add(r as u64), max_iter, tol)?;
        let better = match &best {
            None => true,
            Some(b) => run.objective < b.objective,
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_pair_exact() {
        let pts = [0.0, 10.0];
        let res = kmeans(&pts, 1, 2, 0, 50, 1e-12).unwrap();
        assert_eq!(res.objective, 0.0);
        let mut cs = vec![res.centroids[0], res.centroids[1]];
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.0, 10.0]);
        assert_ne!(res.assignments[0], res.assignments[1]);
    }

    #[test]
    fn three_points_hand_partition() {
        // {0,1,10}, K=2 → clusters {0,1} and {10}, objective 0.5
        let pts = [0.0, 1.0, 10.0];
        let res = kmeans_restarts(&pts, 1, 2, 0, 100, 1e-12, 10).unwrap();
        assert!((res.objective - 0.5).abs() < 1e-12, "{}", res.objective);
        assert_eq!(res.assignments[0], res.assignments[1]);
        assert_ne!(res.assignments[0], res.assignments[2]);
    }

    #[test]
    fn rejects_more_clusters_than_points() {
        let pts = [0.0, 1.0];
        assert!(kmeans(&pts, 1, 3, 0, 10, 1e-9).is_err());
    }

    #[test]
    fn identical_points_terminate() {
        let pts = [2.0; 12];
        let res = kmeans(&pts, 2, 3, 1, 50, 1e-12).unwrap();
        assert_eq!(res.objective, 0.0);
    }

    #[test]
    fn deterministic_per_seed() {
        let pts: Vec<f64> = (0..60).map(|i| ((i * 37) % 23) as f64 * 0.7).collect();
        let a = kmeans(&pts, 2, 3, 9, 100, 1e-12).unwrap();
        let b = kmeans(&pts, 2, 3, 9, 100, 1e-12).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.objective, b.objective);
    }
}
