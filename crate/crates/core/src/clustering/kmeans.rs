use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{canonicalize, check_points, distinct_count, ClusterModel, Clustering, Labeling, Method, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, squared_euclidean};

const MAX_ITERS: usize = 300;

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = squared_euclidean(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// D^2-weighted seeding: each new center is drawn with probability
/// proportional to its squared distance from the closest chosen center.
fn seed_centers(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points
        .iter()
        .map(|p| squared_euclidean(p, &centers[0]))
        .collect();
    while centers.len() < k {
        let total = pairwise_sum(&dist);
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in dist.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            if target < d {
                pick = Some(i);
                break;
            }
            target -= d;
        }
        // Rounding can walk off the end; fall back to the farthest point.
        let pick = pick.unwrap_or_else(|| {
            dist.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                .0
        });
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_euclidean(p, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd's k-means with D^2 seeding. The trace holds the within-cluster
/// squared error after every assignment step.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    let dims = check_points(points)?;
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let distinct = distinct_count(points);
    if k > distinct {
        return Err(Error::TooManyClusters { k, points: distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();

    for _ in 0..MAX_ITERS {
        let assigned: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        let dists: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        trace.push(pairwise_sum(&dists));
        let changed = assigned.iter().zip(&labels).any(|(a, &l)| a.0 != l);
        for (l, a) in labels.iter_mut().zip(&assigned) {
            *l = a.0;
        }
        if !changed {
            break;
        }

        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut spare = dists.clone();
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // Re-seed an empty cluster at the worst-served point.
                let far = spare
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &d)| if d > b.1 { (i, d) } else { b })
                    .0;
                centers[c] = points[far].clone();
                spare[far] = f64::NEG_INFINITY;
            }
        }
    }

    let (labels, order) = canonicalize(&labels);
    let means: Vec<Vec<f64>> = order.iter().map(|&o| centers[o].clone()).collect();
    Ok(Clustering {
        model: ClusterModel {
            method: Method::Kmeans,
            k_effective: means.len(),
            params: ModelParams::Centroids { means },
        },
        labeling: Labeling { labels },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::adjusted_rand_index;
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], per: usize, sigma: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (i, c) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(i);
            }
        }
        (pts, truth)
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let c = kmeans(&pts, 1, 3).unwrap();
        assert_eq!(c.model.means()[0], vec![2.0, 1.0]);
        assert_eq!(c.labeling.labels, vec![0, 0, 0]);
    }

    #[test]
    fn far_pair_splits() {
        let pts = vec![vec![0.0], vec![100.0]];
        let c = kmeans(&pts, 2, 0).unwrap();
        assert_eq!(c.labeling.labels, vec![0, 1]);
    }

    #[test]
    fn planted_gaussians_recovered() {
        let (pts, truth) = blobs(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]], 60, 0.1, 11);
        for seed in 0..5 {
            let c = kmeans(&pts, 3, seed).unwrap();
            assert!(adjusted_rand_index(&c.labeling.labels, &truth) >= 0.99);
        }
    }

    #[test]
    fn objective_never_increases() {
        let (pts, _) = blobs(&[[0.0, 0.0], [3.0, 0.0], [1.5, 2.0]], 80, 1.0, 5);
        let c = kmeans(&pts, 6, 9).unwrap();
        assert!(c.trace.windows(2).all(|w| w[1] <= w[0]), "{:?}", c.trace);
    }

    #[test]
    fn too_many_clusters() {
        let pts = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert!(matches!(kmeans(&pts, 3, 0), Err(Error::TooManyClusters { k: 3, points: 2 })));
    }

    #[test]
    fn deterministic_per_seed() {
        let (pts, _) = blobs(&[[0.0, 0.0], [3.0, 0.0]], 50, 1.0, 1);
        assert_eq!(kmeans(&pts, 4, 7).unwrap(), kmeans(&pts, 4, 7).unwrap());
    }
}
