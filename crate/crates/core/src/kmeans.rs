//! Lloyd's algorithm with kmeans++ seeding.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Deterministic per seed; runs at most 100 iterations or until the largest
/// centroid shift drops below 1e-6. Empty clusters are re-seeded from the
/// point farthest from its centroid.
pub fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = points.nrows();
    if n < k {
        return Err(Error::TooFewPoints { have: n, need: k });
    }
    if k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    let dim = points.ncols();
    let mut rng = Rng::stream(seed, 0x43);

    // kmeans++ seeding
    let mut centroids = Array2::<f64>::zeros((k, dim));
    let first = rng.below(n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut best_d2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.row_mut(c).assign(&points.row(chosen));
        for i in 0..n {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < best_d2[i] {
                best_d2[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    let mut iterations = 0;
    for it in 0..100 {
        iterations = it + 1;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(points.row(i), centroids.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignments[i] = best;
        }

        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &points.row(i);
        }
        // re-seed empty clusters from the farthest point
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), centroids.row(assignments[a]));
                        let db = sq_dist(points.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                sums.row_mut(c).assign(&points.row(far));
                counts[c] = 1;
                assignments[far] = c;
            }
        }

        let mut shift: f64 = 0.0;
        for c in 0..k {
            let mut new = sums.row(c).to_owned();
            new.mapv_inplace(|v| v / counts[c] as f64);
            let s = sq_dist(new.view(), centroids.row(c)).sqrt();
            shift = shift.max(s);
            centroids.row_mut(c).assign(&new);
        }
        if shift < 1e-6 {
            break;
        }
    }

    // final assignment + inertia against the converged centroids
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(points.row(i), centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
        iterations,
    })
}
