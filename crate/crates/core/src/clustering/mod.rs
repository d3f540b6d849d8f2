//! Segment clustering: group pooled segment features into subword units.
//!
//! Five methods share one output shape, [`Clustering`]: a [`ClusterModel`],
//! a total [`Labeling`] and the per-iteration objective trace (k-means
//! objective, EM log-likelihood, variational lower bound, or merge heights
//! for the agglomerative method). Labels are renumbered so that cluster ids
//! appear in order of their first point.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Artifact;

mod ahc;
mod density;
mod gmm;
mod kmeans;

pub use ahc::{ahc, choose_k_by_merge_gap, dendrogram, Dendrogram, Linkage, Merge, DEFAULT_AHC_CAP};
pub use density::{density_cluster, DensityOptions, DEFAULT_MIN_CLUSTER_SIZE};
pub use gmm::{bgmm_variational, gmm_em, BgmmOptions, VARIANCE_FLOOR};
pub use kmeans::kmeans;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Ahc,
    Gmm,
    Bgmm,
    Density,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(Method::Kmeans),
            "ahc" => Ok(Method::Ahc),
            "gmm" => Ok(Method::Gmm),
            "bgmm" => Ok(Method::Bgmm),
            "density" => Ok(Method::Density),
            other => Err(Error::invalid(format!("unknown clustering method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelParams {
    Centroids {
        means: Vec<Vec<f64>>,
    },
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
    Exemplars {
        means: Vec<Vec<f64>>,
        sizes: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub method: Method,
    pub k_effective: usize,
    pub params: ModelParams,
}

impl ClusterModel {
    pub fn means(&self) -> &[Vec<f64>] {
        match &self.params {
            ModelParams::Centroids { means }
            | ModelParams::Mixture { means, .. }
            | ModelParams::Exemplars { means, .. } => means,
        }
    }
}

impl Artifact for ClusterModel {
    const KIND: &'static str = "cluster_model";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labeling {
    pub labels: Vec<usize>,
}

impl Artifact for Labeling {
    const KIND: &'static str = "labeling";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub model: ClusterModel,
    pub labeling: Labeling,
    /// Objective value after each iteration.
    pub trace: Vec<f64>,
}

pub(crate) fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let dims = points.first().map(Vec::len).unwrap_or(0);
    if points.is_empty() {
        return Err(Error::invalid("no points to cluster"));
    }
    if dims == 0 {
        return Err(Error::invalid("points have zero dimensions"));
    }
    if let Some(i) = points.iter().position(|p| p.len() != dims) {
        return Err(Error::invalid(format!("point {i} has {} dims, expected {dims}", points[i].len())));
    }
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
    }
    Ok(dims)
}

pub(crate) fn distinct_count(points: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = points.iter().collect();
    let cmp = |a: &&Vec<f64>, b: &&Vec<f64>| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    sorted.sort_by(cmp);
    sorted.dedup_by(|a, b| cmp(a, b).is_eq());
    sorted.len()
}

/// Renumbers labels by first appearance. Returns the new labels and the
/// old id for each new id.
pub(crate) fn canonicalize(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut map = BTreeMap::new();
    let mut order = Vec::new();
    let relabeled = labels
        .iter()
        .map(|&l| {
            *map.entry(l).or_insert_with(|| {
                order.push(l);
                order.len() - 1
            })
        })
        .collect();
    (relabeled, order)
}

/// Mean of the points carrying each label `0..k`.
pub(crate) fn label_means(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dims = points[0].len();
    let mut sums = vec![vec![0.0; dims]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_rows: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_cols: f64 = cols.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
