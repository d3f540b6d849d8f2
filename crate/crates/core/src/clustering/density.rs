//! Hierarchical density clustering (HDBSCAN-style) with total labels.
//!
//! Pipeline: core distances -> mutual-reachability minimum spanning tree ->
//! single-linkage tree -> condensed tree pruned at `min_cluster_size` ->
//! excess-of-mass selection (the root may be selected, so a single dense
//! region yields one cluster). Points left as outliers are then given the
//! cluster of their nearest clustered point; ties go to the lower cluster id.

use rayon::prelude::*;

use super::{canonicalize, check_points, label_means, ClusterModel, Clustering, Labeling, Method, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::euclidean;

pub const DEFAULT_MIN_CLUSTER_SIZE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensityOptions {
    pub min_cluster_size: usize,
    /// Neighbourhood size for core distances; `None` means `min_cluster_size`.
    pub min_samples: Option<usize>,
}

impl Default for DensityOptions {
    fn default() -> Self {
        DensityOptions {
            min_cluster_size: DEFAULT_MIN_CLUSTER_SIZE,
            min_samples: None,
        }
    }
}

struct CondensedRow {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn core_distances(points: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.clamp(1, n);
    points
        .par_iter()
        .map(|p| {
            let mut row: Vec<f64> = points.iter().map(|q| euclidean(p, q)).collect();
            let (_, kth, _) = row.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect()
}

/// Prim's algorithm on the dense mutual-reachability graph.
fn mst(points: &[Vec<f64>], core: &[f64]) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let updates: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&j| !in_tree[j])
            .map(|j| {
                let d = euclidean(&points[current], &points[j]).max(core[current]).max(core[j]);
                (j, d)
            })
            .collect();
        for (j, d) in updates {
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next], next, best[next]));
        current = next;
    }
    edges
}

/// Single-linkage merges `(left, right, distance, size)`; merge i creates node n + i.
fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<(usize, usize, f64, usize)> {
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(edges.len());
    for (i, (a, b, d)) in edges.into_iter().enumerate() {
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, b);
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push((ra, rb, d, size[node]));
    }
    merges
}

fn condense(n: usize, merges: &[(usize, usize, f64, usize)], min_size: usize) -> Vec<CondensedRow> {
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].3 };
    let leaves_under = |node: usize| -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let (l, r, _, _) = merges[x - n];
                stack.push(r);
                stack.push(l);
            }
        }
        out
    };
    let root = n + merges.len() - 1;
    let mut label = vec![usize::MAX; 2 * n];
    label[root] = n;
    let mut next_label = n + 1;
    let mut rows = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let (left, right, dist, _) = merges[node - n];
        let lambda = if dist > 0.0 { 1.0 / dist } else { f64::INFINITY };
        let parent = label[node];
        let (lc, rc) = (size_of(left), size_of(right));
        let big_l = lc >= min_size;
        let big_r = rc >= min_size;
        for (child, count, big, other_big) in [(left, lc, big_l, big_r), (right, rc, big_r, big_l)] {
            if big && other_big {
                label[child] = next_label;
                next_label += 1;
                rows.push(CondensedRow { parent, child: label[child], lambda, size: count });
                queue.push_back(child);
            } else if big {
                // The parent cluster continues through its large child.
                label[child] = parent;
                queue.push_back(child);
            } else {
                for leaf in leaves_under(child) {
                    rows.push(CondensedRow { parent, child: leaf, lambda, size: 1 });
                }
            }
        }
    }
    rows
}

/// Excess-of-mass selection over the condensed tree, root included.
fn select_clusters(n: usize, rows: &[CondensedRow]) -> Vec<usize> {
    let max_label = rows.iter().map(|r| r.parent.max(r.child)).max().unwrap_or(n).max(n);
    let count = max_label - n + 1;
    let mut birth = vec![0.0; count];
    for r in rows.iter().filter(|r| r.child >= n) {
        birth[r.child - n] = r.lambda;
    }
    let mut stability = vec![0.0; count];
    for r in rows {
        let lambda = if r.lambda.is_finite() { r.lambda } else { f64::MAX.sqrt() };
        stability[r.parent - n] += (lambda - birth[r.parent - n]) * r.size as f64;
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); count];
    for r in rows.iter().filter(|r| r.child >= n) {
        children[r.parent - n].push(r.child - n);
    }
    let mut selected = vec![false; count];
    for c in (0..count).rev() {
        let subtree: f64 = children[c].iter().map(|&ch| stability[ch]).sum();
        if !children[c].is_empty() && subtree > stability[c] {
            stability[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(x) = stack.pop() {
                selected[x] = false;
                stack.extend(children[x].iter().copied());
            }
        }
    }

    let mut labels = vec![usize::MAX; n];
    for c in (0..count).filter(|&c| selected[c]) {
        let mut stack = vec![c];
        while let Some(x) = stack.pop() {
            for r in rows.iter().filter(|r| r.parent == x + n) {
                if r.child < n {
                    labels[r.child] = c;
                } else {
                    stack.push(r.child - n);
                }
            }
        }
    }
    labels
}

/// Density clustering with every outlier attached to the cluster of its
/// nearest clustered point.
pub fn density_cluster(points: &[Vec<f64>], options: DensityOptions) -> Result<Clustering> {
    check_points(points)?;
    let min_size = options.min_cluster_size;
    if min_size < 2 {
        return Err(Error::invalid(format!("min_cluster_size must be >= 2, got {min_size}")));
    }
    let n = points.len();
    if n < min_size {
        return Err(Error::NoDenseRegion);
    }
    let core = core_distances(points, options.min_samples.unwrap_or(min_size));
    let merges = single_linkage(n, mst(points, &core));
    let rows = condense(n, &merges, min_size);
    let raw = select_clusters(n, &rows);

    let clustered: Vec<usize> = (0..n).filter(|&i| raw[i] != usize::MAX).collect();
    if clustered.is_empty() {
        return Err(Error::NoDenseRegion);
    }
    let clustered_raw: Vec<usize> = clustered.iter().map(|&i| raw[i]).collect();
    let (_, order) = canonicalize(&clustered_raw);
    let id_of = |c: usize| order.iter().position(|&o| o == c).expect("selected cluster");
    let mut labels: Vec<Option<usize>> = raw
        .iter()
        .map(|&c| (c != usize::MAX).then(|| id_of(c)))
        .collect();

    let outliers: Vec<usize> = (0..n).filter(|&i| labels[i].is_none()).collect();
    let assigned: Vec<(usize, usize)> = outliers
        .par_iter()
        .map(|&i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for &j in &clustered {
                let d = euclidean(&points[i], &points[j]);
                let c = labels[j].expect("clustered point");
                if d < best.0 || (d == best.0 && c < best.1) {
                    best = (d, c);
                }
            }
            (i, best.1)
        })
        .collect();
    for (i, c) in assigned {
        labels[i] = Some(c);
    }
    let labels: Vec<usize> = labels.into_iter().map(|l| l.expect("total labels")).collect();
    let k = order.len();
    let means = label_means(points, &labels, k);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    Ok(Clustering {
        model: ClusterModel {
            method: Method::Density,
            k_effective: k,
            params: ModelParams::Exemplars { means, sizes },
        },
        labeling: Labeling { labels },
        trace: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(center: [f64; 2], n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let noise = Normal::new(0.0, sigma).unwrap();
        (0..n)
            .map(|_| vec![center[0] + noise.sample(rng), center[1] + noise.sample(rng)])
            .collect()
    }

    fn opts(min_cluster_size: usize) -> DensityOptions {
        DensityOptions { min_cluster_size, min_samples: None }
    }

    #[test]
    fn two_blobs_absorb_noise() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = blob([0.0, 0.0], 50, 0.5, &mut rng);
            pts.extend(blob([10.0, 0.0], 50, 0.5, &mut rng));
            for _ in 0..5 {
                pts.push(vec![rng.random_range(-5.0..15.0), rng.random_range(6.0..12.0)]);
            }
            let c = density_cluster(&pts, opts(25)).unwrap();
            assert_eq!(c.model.k_effective, 2, "seed {seed}");
            let l = &c.labeling.labels;
            assert!(l[..50].iter().all(|&x| x == l[0]));
            assert!(l[50..100].iter().all(|&x| x == l[50]));
            assert_ne!(l[0], l[50]);
            // Noise goes to the blob it is clearly nearer to.
            for (i, p) in pts.iter().enumerate().skip(100) {
                let d0 = pts[..50].iter().map(|q| euclidean(p, q)).fold(f64::INFINITY, f64::min);
                let d1 = pts[50..100].iter().map(|q| euclidean(p, q)).fold(f64::INFINITY, f64::min);
                if d0 < 0.5 * d1 {
                    assert_eq!(l[i], l[0], "seed {seed} point {i}");
                } else if d1 < 0.5 * d0 {
                    assert_eq!(l[i], l[50], "seed {seed} point {i}");
                }
            }
        }
    }

    #[test]
    fn one_blob_is_one_cluster() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let pts = blob([1.0, -1.0], 120, 1.0, &mut rng);
            let c = density_cluster(&pts, opts(25)).unwrap();
            assert_eq!(c.model.k_effective, 1, "seed {seed}");
        }
    }

    #[test]
    fn equidistant_outlier_goes_to_lower_id() {
        // Two tight groups on a line, a lone point exactly halfway between them.
        let mut pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        pts.extend((0..5).map(|i| vec![10.04 - i as f64 * 0.01, 0.0]));
        pts.push(vec![5.02, 0.0]);
        let c = density_cluster(&pts, opts(4)).unwrap();
        assert_eq!(c.model.k_effective, 2);
        assert_eq!(c.labeling.labels[10], 0);
    }

    #[test]
    fn too_few_points() {
        let pts: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        assert!(matches!(density_cluster(&pts, opts(5)), Err(Error::NoDenseRegion)));
        assert!(density_cluster(&pts, opts(1)).is_err());
    }
}
