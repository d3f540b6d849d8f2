//! Agglomerative hierarchical clustering via the Lance-Williams recurrence.
//!
//! Ward, centroid and median linkage are updated on squared distances;
//! single and complete on plain distances. Heights are always reported as
//! plain distances, so the Ward height of two singletons is their Euclidean
//! distance and in general `sqrt(2 n_a n_b / (n_a + n_b)) * |mean_a - mean_b|`.
//! Centroid and median linkage may produce inversions (a merge lower than
//! an earlier one); that is reported as-is.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{canonicalize, check_points, label_means, ClusterModel, Clustering, Labeling, Method, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::squared_euclidean;

pub const DEFAULT_AHC_CAP: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Complete,
    Single,
    Centroid,
    Median,
    Ward,
}

impl Linkage {
    fn squared(self) -> bool {
        matches!(self, Linkage::Centroid | Linkage::Median | Linkage::Ward)
    }
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            "centroid" => Ok(Linkage::Centroid),
            "median" => Ok(Linkage::Median),
            "ward" => Ok(Linkage::Ward),
            other => Err(Error::invalid(format!("unknown linkage '{other}'"))),
        }
    }
}

/// One merge. Leaves are nodes `0..n`; merge `i` creates node `n + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Flat labels after applying the first `n - k` merges.
    pub fn cut(&self, k: usize) -> Vec<usize> {
        let n = self.leaves;
        let k = k.clamp(1, n);
        let mut parent: Vec<usize> = (0..2 * n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (i, m) in self.merges.iter().take(n - k).enumerate() {
            let node = n + i;
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            parent[ra] = node;
            parent[rb] = node;
        }
        let roots: Vec<usize> = (0..n).map(|i| find(&mut parent, i)).collect();
        canonicalize(&roots).0
    }
}

struct Condensed {
    n: usize,
    values: Vec<f64>,
}

impl Condensed {
    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.index(i, j)]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.values[idx] = v;
    }
}

/// Builds the full merge tree. Memory is O(n^2); `cap` bounds n.
pub fn dendrogram(points: &[Vec<f64>], linkage: Linkage, cap: usize) -> Result<Dendrogram> {
    check_points(points)?;
    let n = points.len();
    if n > cap {
        return Err(Error::SizeCap { n, cap });
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let d2 = squared_euclidean(&points[i], &points[j]);
                    if linkage.squared() {
                        d2
                    } else {
                        d2.sqrt()
                    }
                })
                .collect()
        })
        .collect();
    let mut dist = Condensed {
        n,
        values: rows.into_iter().flatten().collect(),
    };

    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut node: Vec<usize> = (0..n).collect();
    // Nearest active neighbour with a larger slot index.
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];
    let rescan = |i: usize, active: &[bool], dist: &Condensed| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in i + 1..n {
            if active[j] {
                let d = dist.get(i, j);
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        best
    };
    for i in 0..n {
        (nn[i], nn_dist[i]) = rescan(i, &active, &dist);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut i = usize::MAX;
        let mut best = f64::INFINITY;
        for s in 0..n {
            if active[s] && nn[s] != usize::MAX && nn_dist[s] < best {
                best = nn_dist[s];
                i = s;
            }
        }
        let j = nn[i];
        let d_ij = best;
        let (ni, nj) = (size[i] as f64, size[j] as f64);

        for k in 0..n {
            if !active[k] || k == i || k == j {
                continue;
            }
            let (d_ik, d_jk) = (dist.get(i, k), dist.get(j, k));
            let nk = size[k] as f64;
            let updated = match linkage {
                Linkage::Single => d_ik.min(d_jk),
                Linkage::Complete => d_ik.max(d_jk),
                Linkage::Centroid => {
                    (ni * d_ik + nj * d_jk) / (ni + nj) - ni * nj * d_ij / ((ni + nj) * (ni + nj))
                }
                Linkage::Median => 0.5 * d_ik + 0.5 * d_jk - 0.25 * d_ij,
                Linkage::Ward => ((nk + ni) * d_ik + (nk + nj) * d_jk - nk * d_ij) / (ni + nj + nk),
            };
            dist.set(i, k, updated.max(0.0));
        }

        let height = if linkage.squared() { d_ij.max(0.0).sqrt() } else { d_ij };
        merges.push(Merge {
            a: node[i].min(node[j]),
            b: node[i].max(node[j]),
            height,
            size: size[i] + size[j],
        });
        active[j] = false;
        size[i] += size[j];
        node[i] = n + step;
        nn[j] = usize::MAX;

        (nn[i], nn_dist[i]) = rescan(i, &active, &dist);
        for k in 0..i {
            if !active[k] {
                continue;
            }
            if nn[k] == i || nn[k] == j {
                (nn[k], nn_dist[k]) = rescan(k, &active, &dist);
            } else {
                let d = dist.get(k, i);
                if d < nn_dist[k] || (d == nn_dist[k] && i < nn[k]) {
                    nn[k] = i;
                    nn_dist[k] = d;
                }
            }
        }
        for k in i + 1..j {
            if active[k] && nn[k] == j {
                (nn[k], nn_dist[k]) = rescan(k, &active, &dist);
            }
        }
    }
    Ok(Dendrogram { leaves: n, merges })
}

/// Cuts the dendrogram of `points` at `k` clusters.
pub fn ahc(points: &[Vec<f64>], k: usize, linkage: Linkage, cap: usize) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::TooManyClusters {
            k,
            points: points.len(),
        });
    }
    let tree = dendrogram(points, linkage, cap)?;
    let labels = tree.cut(k);
    let means = label_means(points, &labels, k);
    Ok(Clustering {
        model: ClusterModel {
            method: Method::Ahc,
            k_effective: k,
            params: ModelParams::Centroids { means },
        },
        labeling: Labeling { labels },
        trace: tree.merges.iter().map(|m| m.height).collect(),
    })
}

/// Picks the cluster count in `[k_min, k_max]` whose cut sits under the
/// largest relative jump in merge height.
pub fn choose_k_by_merge_gap(tree: &Dendrogram, k_min: usize, k_max: usize) -> usize {
    let n = tree.leaves;
    let k_max = k_max.min(n.saturating_sub(1)).max(1);
    let k_min = k_min.clamp(1, k_max);
    let mut best = (k_min, f64::NEG_INFINITY);
    for k in k_min..=k_max {
        // Merge n-k takes k clusters to k-1; merge n-k-1 produced the k-cut.
        let above = tree.merges[n - k].height;
        let below = tree.merges[n - k - 1].height;
        let gap = (above - below) / below.max(1e-12);
        if gap > best.1 {
            best = (k, gap);
        }
    }
    best.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_point_alone_when_k_is_n() {
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 1.7, (i * i) as f64]).collect();
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Centroid, Linkage::Median, Linkage::Ward] {
            let c = ahc(&pts, 5, linkage, DEFAULT_AHC_CAP).unwrap();
            assert_eq!(c.labeling.labels, vec![0, 1, 2, 3, 4]);
        }
    }

    #[test]
    fn single_linkage_separates_chains() {
        // Two horizontal chains with spacing 1, separated vertically by 5.
        let mut pts = Vec::new();
        for i in 0..8 {
            pts.push(vec![i as f64, 0.0]);
        }
        for i in 0..8 {
            pts.push(vec![i as f64 + 0.5, 5.0]);
        }
        let c = ahc(&pts, 2, Linkage::Single, DEFAULT_AHC_CAP).unwrap();
        let expect: Vec<usize> = (0..16).map(|i| i / 8).collect();
        assert_eq!(c.labeling.labels, expect);
    }

    #[test]
    fn ward_height_of_two_singletons_is_their_distance() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let tree = dendrogram(&pts, Linkage::Ward, 10).unwrap();
        assert!((tree.merges[0].height - 5.0).abs() < 1e-12);
    }

    #[test]
    fn ward_table_formula_for_unequal_sizes() {
        // {0, 2} (mean 1) then merge with {10}: sqrt(2*2*1/3) * 9.
        let pts = vec![vec![0.0], vec![2.0], vec![10.0]];
        let tree = dendrogram(&pts, Linkage::Ward, 10).unwrap();
        let expect = (4.0f64 / 3.0).sqrt() * 9.0;
        assert!((tree.merges[1].height - expect).abs() < 1e-12);
    }

    #[test]
    fn size_cap_enforced() {
        let pts: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64]).collect();
        assert!(matches!(ahc(&pts, 2, Linkage::Ward, 10), Err(Error::SizeCap { n: 11, cap: 10 })));
    }

    #[test]
    fn merge_gap_finds_three_groups() {
        let mut pts = Vec::new();
        for c in [0.0, 50.0, 100.0] {
            for i in 0..5 {
                pts.push(vec![c + i as f64 * 0.1]);
            }
        }
        let tree = dendrogram(&pts, Linkage::Ward, 100).unwrap();
        assert_eq!(choose_k_by_merge_gap(&tree, 2, 8), 3);
    }
}
