//! Diagonal-covariance Gaussian mixtures: maximum likelihood by EM, and a
//! mean-field variational treatment with a symmetric Dirichlet prior on the
//! weights and independent Normal-Gamma priors on each mean/precision pair.
//! Both start from a k-means partition.

use std::f64::consts::PI;

use rayon::prelude::*;
use statrs::function::gamma::{digamma, ln_gamma};

use super::{canonicalize, check_points, kmeans, ClusterModel, Clustering, Labeling, Method, ModelParams};
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, pairwise_sum};

pub const VARIANCE_FLOOR: f64 = 1e-6;

const EM_MAX_ITERS: usize = 500;
const EM_TOL: f64 = 1e-10;

struct Diagonal {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl Diagonal {
    /// log w_k + log N(x | mu_k, diag var_k) for every component.
    fn joint_log(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(&w, (mu, var))| {
                let mut lp = w.ln();
                for ((xi, m), v) in x.iter().zip(mu).zip(var) {
                    lp -= 0.5 * ((2.0 * PI * v).ln() + (xi - m) * (xi - m) / v);
                }
                lp
            })
            .collect()
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Responsibility-weighted counts, means and variances.
fn weighted_moments(points: &[Vec<f64>], resp: &[Vec<f64>], k: usize) -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dims = points[0].len();
    let counts: Vec<f64> = (0..k)
        .map(|c| pairwise_sum(&resp.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect();
    let mut means = vec![vec![0.0; dims]; k];
    let mut vars = vec![vec![0.0; dims]; k];
    for c in 0..k {
        if counts[c] <= 0.0 {
            continue;
        }
        for d in 0..dims {
            let terms: Vec<f64> = points.iter().zip(resp).map(|(p, r)| r[c] * p[d]).collect();
            means[c][d] = pairwise_sum(&terms) / counts[c];
        }
        for d in 0..dims {
            let terms: Vec<f64> = points
                .iter()
                .zip(resp)
                .map(|(p, r)| r[c] * (p[d] - means[c][d]) * (p[d] - means[c][d]))
                .collect();
            vars[c][d] = pairwise_sum(&terms) / counts[c];
        }
    }
    (counts, means, vars)
}

fn hard_responsibilities(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&l| {
            let mut r = vec![0.0; k];
            r[l] = 1.0;
            r
        })
        .collect()
}

/// EM for a k-component diagonal GMM. The trace is the data
/// log-likelihood at each E-step, which never decreases.
pub fn gmm_em(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Clustering> {
    check_points(points)?;
    if k == 0 || points.len() < k {
        return Err(Error::TooManyClusters {
            k,
            points: points.len(),
        });
    }
    let init = kmeans(points, k, seed)?;
    let n = points.len() as f64;
    let (counts, means, mut variances) =
        weighted_moments(points, &hard_responsibilities(&init.labeling.labels, k), k);
    variances
        .iter_mut()
        .flatten()
        .for_each(|v| *v = v.max(VARIANCE_FLOOR));
    let mut model = Diagonal {
        weights: counts.iter().map(|c| c / n).collect(),
        means,
        variances,
    };

    let mut trace = Vec::new();
    let mut resp;
    loop {
        let joint: Vec<Vec<f64>> = points.par_iter().map(|p| model.joint_log(p)).collect();
        let norms: Vec<f64> = joint.iter().map(|j| log_sum_exp(j)).collect();
        let ll = pairwise_sum(&norms);
        resp = joint
            .iter()
            .zip(&norms)
            .map(|(j, z)| j.iter().map(|v| (v - z).exp()).collect::<Vec<f64>>())
            .collect::<Vec<_>>();
        let converged = trace
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() <= EM_TOL * ll.abs().max(1.0));
        trace.push(ll);
        if converged || trace.len() >= EM_MAX_ITERS {
            break;
        }
        let (counts, means, vars) = weighted_moments(points, &resp, k);
        for c in 0..k {
            // A component that lost all mass keeps its old parameters at weight 0.
            model.weights[c] = counts[c] / n;
            if counts[c] > 0.0 {
                model.means[c] = means[c].clone();
                model.variances[c] = vars[c].iter().map(|v| v.max(VARIANCE_FLOOR)).collect();
            }
        }
    }

    let raw: Vec<usize> = resp.iter().map(|r| argmax(r)).collect();
    let (labels, order) = canonicalize(&raw);
    Ok(Clustering {
        model: ClusterModel {
            method: Method::Gmm,
            k_effective: order.len(),
            params: ModelParams::Mixture {
                weights: renormalize(order.iter().map(|&o| model.weights[o]).collect()),
                means: order.iter().map(|&o| model.means[o].clone()).collect(),
                variances: order.iter().map(|&o| model.variances[o].clone()).collect(),
            },
        },
        labeling: Labeling { labels },
        trace,
    })
}

fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    let total = pairwise_sum(&w);
    w.iter_mut().for_each(|v| *v /= total);
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgmmOptions {
    /// Concentration of the symmetric Dirichlet weight prior; `None` means `1 / k_max`.
    pub weight_prior: Option<f64>,
    /// Components holding less than this fraction of the responsibility mass are dropped.
    pub prune_eps: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for BgmmOptions {
    fn default() -> Self {
        BgmmOptions {
            weight_prior: None,
            prune_eps: 1e-3,
            max_iters: 2000,
            tol: 1e-12,
        }
    }
}

struct Prior {
    alpha: f64,
    beta: f64,
    mean: Vec<f64>,
    shape: f64,
    rate: Vec<f64>,
}

struct Posterior {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<Vec<f64>>,
    shape: Vec<f64>,
    rate: Vec<Vec<f64>>,
}

impl Posterior {
    fn update(prior: &Prior, points: &[Vec<f64>], resp: &[Vec<f64>], k: usize) -> Posterior {
        let (counts, xbar, spread) = weighted_moments(points, resp, k);
        let dims = prior.mean.len();
        let mut post = Posterior {
            alpha: vec![0.0; k],
            beta: vec![0.0; k],
            mean: vec![vec![0.0; dims]; k],
            shape: vec![0.0; k],
            rate: vec![vec![0.0; dims]; k],
        };
        for c in 0..k {
            let nk = counts[c];
            post.alpha[c] = prior.alpha + nk;
            post.beta[c] = prior.beta + nk;
            post.shape[c] = prior.shape + 0.5 * nk;
            for d in 0..dims {
                let dev = xbar[c][d] - prior.mean[d];
                post.mean[c][d] = (prior.beta * prior.mean[d] + nk * xbar[c][d]) / post.beta[c];
                post.rate[c][d] = prior.rate[d]
                    + 0.5 * (nk * spread[c][d] + prior.beta * nk * dev * dev / post.beta[c]);
            }
        }
        post
    }

    fn expected_log_weights(&self) -> Vec<f64> {
        let total: f64 = self.alpha.iter().sum();
        let dt = digamma(total);
        self.alpha.iter().map(|&a| digamma(a) - dt).collect()
    }

    fn expected_log_precision(&self, c: usize) -> Vec<f64> {
        let ds = digamma(self.shape[c]);
        self.rate[c].iter().map(|&b| ds - b.ln()).collect()
    }

    /// Unnormalized log responsibility of each component for `x`.
    fn log_rho(&self, x: &[f64], elog_w: &[f64]) -> Vec<f64> {
        (0..self.alpha.len())
            .map(|c| {
                let elog_lambda = self.expected_log_precision(c);
                let mut v = elog_w[c];
                for d in 0..x.len() {
                    let dev = x[d] - self.mean[c][d];
                    let quad = self.shape[c] / self.rate[c][d] * dev * dev + 1.0 / self.beta[c];
                    v += 0.5 * elog_lambda[d] - 0.5 * (2.0 * PI).ln() - 0.5 * quad;
                }
                v
            })
            .collect()
    }

    fn elbo(&self, prior: &Prior, points: &[Vec<f64>], resp: &[Vec<f64>]) -> f64 {
        let k = self.alpha.len();
        let elog_w = self.expected_log_weights();
        let ln_c = |a: &[f64]| ln_gamma(a.iter().sum()) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>();

        // E[ln p(X | Z, mu, lambda)] + E[ln p(Z | pi)] - E[ln q(Z)]
        let per_point: Vec<f64> = points
            .par_iter()
            .zip(resp)
            .map(|(x, r)| {
                let rho = self.log_rho(x, &elog_w);
                let mut v = 0.0;
                for c in 0..k {
                    if r[c] > 0.0 {
                        v += r[c] * (rho[c] - r[c].ln());
                    }
                }
                v
            })
            .collect();
        let mut total = pairwise_sum(&per_point);

        // E[ln p(pi)] - E[ln q(pi)]
        total += ln_c(&vec![prior.alpha; k]) + (prior.alpha - 1.0) * elog_w.iter().sum::<f64>();
        total -= ln_c(&self.alpha)
            + self.alpha.iter().zip(&elog_w).map(|(a, e)| (a - 1.0) * e).sum::<f64>();

        // E[ln p(mu, lambda)] - E[ln q(mu, lambda)]
        for c in 0..k {
            let elog_lambda = self.expected_log_precision(c);
            for d in 0..prior.mean.len() {
                let e_lambda = self.shape[c] / self.rate[c][d];
                let dev = self.mean[c][d] - prior.mean[d];
                let e_quad = e_lambda * dev * dev + 1.0 / self.beta[c];
                let log_p = 0.5 * (prior.beta / (2.0 * PI)).ln() + 0.5 * elog_lambda[d]
                    - 0.5 * prior.beta * e_quad
                    + prior.shape * prior.rate[d].ln()
                    - ln_gamma(prior.shape)
                    + (prior.shape - 1.0) * elog_lambda[d]
                    - prior.rate[d] * e_lambda;
                let log_q = 0.5 * (self.beta[c] / (2.0 * PI)).ln() + 0.5 * elog_lambda[d] - 0.5
                    + self.shape[c] * self.rate[c][d].ln()
                    - ln_gamma(self.shape[c])
                    + (self.shape[c] - 1.0) * elog_lambda[d]
                    - self.shape[c];
                total += log_p - log_q;
            }
        }
        total
    }

    fn responsibilities(&self, points: &[Vec<f64>], keep: &[usize]) -> Vec<Vec<f64>> {
        let elog_w = self.expected_log_weights();
        points
            .par_iter()
            .map(|x| {
                let rho = self.log_rho(x, &elog_w);
                let kept: Vec<f64> = keep.iter().map(|&c| rho[c]).collect();
                let z = log_sum_exp(&kept);
                kept.iter().map(|v| (v - z).exp()).collect()
            })
            .collect()
    }
}

/// Variational Bayesian GMM with at most `k_max` components. Components
/// whose share of the responsibility mass falls below `prune_eps` are
/// dropped at the end. The trace is the evidence lower bound after every
/// parameter update, which never decreases.
pub fn bgmm_variational(points: &[Vec<f64>], k_max: usize, seed: u64, options: BgmmOptions) -> Result<Clustering> {
    let dims = check_points(points)?;
    if k_max == 0 {
        return Err(Error::invalid("k_max must be at least 1"));
    }
    if points.len() < k_max {
        return Err(Error::TooManyClusters {
            k: k_max,
            points: points.len(),
        });
    }
    let n = points.len() as f64;
    let data_mean: Vec<f64> = (0..dims)
        .map(|d| pairwise_sum(&points.iter().map(|p| p[d]).collect::<Vec<_>>()) / n)
        .collect();
    let data_var: Vec<f64> = (0..dims)
        .map(|d| {
            let dev: Vec<f64> = points.iter().map(|p| (p[d] - data_mean[d]).powi(2)).collect();
            (pairwise_sum(&dev) / n).max(VARIANCE_FLOOR)
        })
        .collect();
    let shape = 1.0;
    let prior = Prior {
        alpha: options.weight_prior.unwrap_or(1.0 / k_max as f64),
        beta: 1.0,
        rate: data_var.iter().map(|v| shape * v).collect(),
        mean: data_mean,
        shape,
    };

    let init = kmeans(points, k_max, seed)?;
    let all: Vec<usize> = (0..k_max).collect();
    let mut resp = hard_responsibilities(&init.labeling.labels, k_max);
    let mut post;
    let mut trace: Vec<f64> = Vec::new();
    loop {
        post = Posterior::update(&prior, points, &resp, k_max);
        let bound = post.elbo(&prior, points, &resp);
        let converged = trace
            .last()
            .is_some_and(|prev| (bound - prev).abs() <= options.tol * bound.abs().max(1.0));
        trace.push(bound);
        if converged || trace.len() >= options.max_iters {
            break;
        }
        resp = post.responsibilities(points, &all);
    }

    let mass: Vec<f64> = (0..k_max)
        .map(|c| pairwise_sum(&resp.iter().map(|r| r[c]).collect::<Vec<_>>()))
        .collect();
    let mut keep: Vec<usize> = (0..k_max).filter(|&c| mass[c] / n >= options.prune_eps).collect();
    if keep.is_empty() {
        keep.push(argmax(&mass));
    }
    let final_resp = post.responsibilities(points, &keep);
    let raw: Vec<usize> = final_resp.iter().map(|r| keep[argmax(r)]).collect();
    let (labels, order) = canonicalize(&raw);
    let weights = renormalize(order.iter().map(|&c| post.alpha[c]).collect());
    Ok(Clustering {
        model: ClusterModel {
            method: Method::Bgmm,
            k_effective: order.len(),
            params: ModelParams::Mixture {
                weights,
                means: order.iter().map(|&c| post.mean[c].clone()).collect(),
                variances: order
                    .iter()
                    .map(|&c| {
                        post.rate[c]
                            .iter()
                            .map(|b| (b / post.shape[c]).max(VARIANCE_FLOOR))
                            .collect()
                    })
                    .collect(),
            },
        },
        labeling: Labeling { labels },
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::adjusted_rand_index;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn two_blobs(per: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (i, c) in [[0.0, 0.0], [8.0, 8.0]].iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![c[0] + noise.sample(&mut rng), c[1] + noise.sample(&mut rng)]);
                truth.push(i);
            }
        }
        (pts, truth)
    }

    #[test]
    fn one_component_matches_sample_statistics() {
        let pts = vec![vec![1.0, 0.0], vec![3.0, 2.0], vec![5.0, 1.0]];
        let c = gmm_em(&pts, 1, 0).unwrap();
        let ModelParams::Mixture { weights, means, variances } = &c.model.params else {
            panic!("mixture expected")
        };
        assert_eq!(weights, &vec![1.0]);
        assert!((means[0][0] - 3.0).abs() < 1e-12 && (means[0][1] - 1.0).abs() < 1e-12);
        assert!((variances[0][0] - 8.0 / 3.0).abs() < 1e-12);
        assert!((variances[0][1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn em_separates_two_gaussians() {
        let (pts, truth) = two_blobs(100, 3);
        let c = gmm_em(&pts, 2, 1).unwrap();
        assert!(adjusted_rand_index(&c.labeling.labels, &truth) >= 0.99);
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        let (pts, _) = two_blobs(80, 4);
        let c = gmm_em(&pts, 5, 2).unwrap();
        assert!(c.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{:?}", c.trace);
    }

    #[test]
    fn variance_floor_engages_on_duplicates() {
        let pts = vec![vec![1.0], vec![1.0], vec![5.0], vec![5.0]];
        let c = gmm_em(&pts, 2, 0).unwrap();
        let ModelParams::Mixture { variances, .. } = &c.model.params else { unreachable!() };
        assert!(variances.iter().flatten().all(|&v| v == VARIANCE_FLOOR));
    }

    #[test]
    fn bgmm_prunes_to_two() {
        let (pts, truth) = two_blobs(100, 5);
        let c = bgmm_variational(&pts, 10, 0, BgmmOptions::default()).unwrap();
        assert_eq!(c.model.k_effective, 2);
        assert!(adjusted_rand_index(&c.labeling.labels, &truth) >= 0.99);
        let ModelParams::Mixture { weights, .. } = &c.model.params else { unreachable!() };
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bgmm_bound_is_monotone() {
        let (pts, _) = two_blobs(60, 6);
        let c = bgmm_variational(&pts, 6, 3, BgmmOptions::default()).unwrap();
        assert!(c.trace.windows(2).all(|w| w[1] >= w[0] - 1e-7), "{:?}", &c.trace[..10.min(c.trace.len())]);
    }

    #[test]
    fn bgmm_single_component_matches_em() {
        let (pts, _) = two_blobs(30, 7);
        let a = bgmm_variational(&pts, 1, 0, BgmmOptions::default()).unwrap();
        let b = gmm_em(&pts, 1, 0).unwrap();
        assert_eq!(a.labeling, b.labeling);
    }
}
