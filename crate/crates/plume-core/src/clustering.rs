//! Gaussian mixture clustering with k-means++ initialization, EM fitting,
//! and a two-stage search over seeds and cluster counts selected by
//! silhouette score.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::rng::{derive_seed_indexed, rng_from_seed};

/// Fitted mixture parameters with diagonal covariances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmParams {
    pub k: usize,
    /// Mixing weights, nonnegative, summing to 1.
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Per-component diagonal covariance, every entry >= `reg_covar`.
    pub covariances: Vec<Vec<f64>>,
    pub reg_covar: f64,
}

/// One stage-1 winner in the cluster-count search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchEntry {
    pub k: usize,
    pub best_seed: u64,
    pub log_likelihood: f64,
    pub silhouette: f64,
}

/// The selected clustering plus the full search log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterModel {
    pub params: GmmParams,
    pub trace_ids: Vec<String>,
    /// Per-row component assignment, aligned to `trace_ids`.
    pub labels: Vec<usize>,
    pub log_likelihood: f64,
    pub silhouette: f64,
    pub search_log: Vec<SearchEntry>,
}

/// EM fit controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub reg_covar: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 200,
            tol: 1e-4,
            reg_covar: 1e-6,
        }
    }
}

/// A finished EM fit before model selection.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    pub labels: Vec<usize>,
    pub log_likelihood: f64,
    /// Total dataset log-likelihood after each E step.
    pub ll_history: Vec<f64>,
}

/// k-means++ seeding: first centroid uniform over rows, each next drawn with
/// probability proportional to squared distance to the nearest chosen one.
pub fn kmeanspp_init(matrix: &FeatureMatrix, k: usize, seed: u64) -> Result<Array2<f64>> {
    let n = matrix.rows();
    let d = matrix.cols();
    if k == 0 || k > n {
        return Err(Error::Clustering(format!(
            "kmeans++ needs 1 <= k <= rows, got k = {k} with {n} rows"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..n));

    let mut d2 = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = *chosen.last().unwrap();
        for (i, nearest) in d2.iter_mut().enumerate() {
            let mut dist = 0.0;
            for j in 0..d {
                let diff = matrix.data[(i, j)] - matrix.data[(last, j)];
                dist += diff * diff;
            }
            if dist < *nearest {
                *nearest = dist;
            }
        }
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            // Every remaining point coincides with a centroid; take any
            // index not yet chosen.
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
    }

    let mut centroids = Array2::zeros((k, d));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&matrix.data.row(i));
    }
    Ok(centroids)
}

/// Log density of `x` under a diagonal Gaussian.
fn log_gauss_diag(x: ndarray::ArrayView1<'_, f64>, mean: &[f64], cov: &[f64]) -> f64 {
    const LOG_2PI: f64 = 1.8378770664093453;
    let mut acc = 0.0;
    for ((&xv, &m), &c) in x.iter().zip(mean).zip(cov) {
        let diff = xv - m;
        acc += LOG_2PI + c.ln() + diff * diff / c;
    }
    -0.5 * acc
}

/// Fit a diagonal-covariance GMM by EM from a k-means++ start.
///
/// Stops when the total log-likelihood improves by less than `opts.tol` or
/// after `opts.max_iters` iterations. An emptied component is re-seeded once
/// from the least-explained point; a second collapse is an error.
pub fn fit_gmm(matrix: &FeatureMatrix, k: usize, seed: u64, opts: FitOptions) -> Result<GmmFit> {
    let n = matrix.rows();
    let d = matrix.cols();
    if k == 0 || k > n {
        return Err(Error::Clustering(format!(
            "gmm needs 1 <= k <= rows, got k = {k} with {n} rows"
        )));
    }

    let centroids = kmeanspp_init(matrix, k, seed)?;
    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<Vec<f64>> = (0..k).map(|c| centroids.row(c).to_vec()).collect();
    let col_var: Vec<f64> = (0..d)
        .map(|j| {
            let col = matrix.data.column(j);
            let m = col.sum() / n as f64;
            col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64 + opts.reg_covar
        })
        .collect();
    let mut covs: Vec<Vec<f64>> = vec![col_var; k];

    let mut resp = Array2::zeros((n, k));
    let mut ll_history = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut reseeded = false;

    for _ in 0..opts.max_iters {
        // E step in log space; row-wise logsumexp.
        let mut total_ll = 0.0;
        let mut least_explained = (0usize, f64::INFINITY);
        for i in 0..n {
            let x = matrix.data.row(i);
            let mut row_max = f64::NEG_INFINITY;
            for c in 0..k {
                let lg = weights[c].ln() + log_gauss_diag(x, &means[c], &covs[c]);
                resp[(i, c)] = lg;
                if lg > row_max {
                    row_max = lg;
                }
            }
            let mut sum = 0.0;
            for c in 0..k {
                sum += (resp[(i, c)] - row_max).exp();
            }
            let ll_i = row_max + sum.ln();
            total_ll += ll_i;
            if ll_i < least_explained.1 {
                least_explained = (i, ll_i);
            }
            for c in 0..k {
                resp[(i, c)] = (resp[(i, c)] - ll_i).exp();
            }
            debug_assert!(
                ((0..k).map(|c| resp[(i, c)]).sum::<f64>() - 1.0).abs() < 1e-12,
                "responsibilities must sum to 1"
            );
        }
        ll_history.push(total_ll);
        if total_ll - prev_ll < opts.tol && prev_ll.is_finite() {
            break;
        }
        prev_ll = total_ll;

        // M step.
        let mut empty = None;
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[(i, c)]).sum();
            if nk < 1e-8 {
                empty = Some(c);
                break;
            }
            weights[c] = nk / n as f64;
            for (j, mean) in means[c].iter_mut().enumerate() {
                *mean = (0..n)
                    .map(|i| resp[(i, c)] * matrix.data[(i, j)])
                    .sum::<f64>()
                    / nk;
            }
            for (j, cov) in covs[c].iter_mut().enumerate() {
                let var = (0..n)
                    .map(|i| {
                        let diff = matrix.data[(i, j)] - means[c][j];
                        resp[(i, c)] * diff * diff
                    })
                    .sum::<f64>()
                    / nk;
                *cov = var + opts.reg_covar;
            }
        }
        if let Some(c) = empty {
            if reseeded {
                return Err(Error::Clustering(format!(
                    "component {c} collapsed twice during EM"
                )));
            }
            reseeded = true;
            let i = least_explained.0;
            means[c] = matrix.data.row(i).to_vec();
            covs[c] = vec![1.0 + opts.reg_covar; d];
            weights[c] = 1.0 / n as f64;
            let wsum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= wsum;
            }
            prev_ll = f64::NEG_INFINITY;
            continue;
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if resp[(i, c)] > resp[(i, best)] {
                    best = c;
                }
            }
            best
        })
        .collect();

    let log_likelihood = *ll_history.last().unwrap();
    Ok(GmmFit {
        params: GmmParams {
            k,
            weights,
            means,
            covariances: covs,
            reg_covar: opts.reg_covar,
        },
        labels,
        log_likelihood,
        ll_history,
    })
}

const SILHOUETTE_SUBSAMPLE: usize = 5000;
const SILHOUETTE_SUBSAMPLE_SEED: u64 = 0x5117_0e77;

/// Mean silhouette coefficient over points, Euclidean distances.
///
/// Singleton clusters contribute 0 for their point. Datasets larger than
/// 5000 rows are scored on a seeded subsample to bound the quadratic cost.
pub fn silhouette_score(matrix: &FeatureMatrix, labels: &[usize]) -> Result<f64> {
    assert_eq!(matrix.rows(), labels.len());
    let distinct = {
        let mut l = labels.to_vec();
        l.sort_unstable();
        l.dedup();
        l
    };
    if distinct.len() < 2 {
        return Err(Error::SilhouetteUndefined);
    }

    let indices: Vec<usize> = if matrix.rows() > SILHOUETTE_SUBSAMPLE {
        let mut rng = rng_from_seed(SILHOUETTE_SUBSAMPLE_SEED);
        let mut idx: Vec<usize> = (0..matrix.rows()).collect();
        for i in 0..SILHOUETTE_SUBSAMPLE {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(SILHOUETTE_SUBSAMPLE);
        idx.sort_unstable();
        idx
    } else {
        (0..matrix.rows()).collect()
    };

    let d = matrix.cols();
    let dist = |a: usize, b: usize| -> f64 {
        let mut acc = 0.0;
        for j in 0..d {
            let diff = matrix.data[(a, j)] - matrix.data[(b, j)];
            acc += diff * diff;
        }
        acc.sqrt()
    };

    let cluster_sizes: Vec<usize> = distinct
        .iter()
        .map(|&c| indices.iter().filter(|&&i| labels[i] == c).count())
        .collect();

    let mut total = 0.0;
    for &i in &indices {
        let own = distinct.iter().position(|&c| c == labels[i]).unwrap();
        if cluster_sizes[own] <= 1 {
            continue; // contributes 0
        }
        let mut sums = vec![0.0; distinct.len()];
        for &j in &indices {
            if i == j {
                continue;
            }
            let cj = distinct.iter().position(|&c| c == labels[j]).unwrap();
            sums[cj] += dist(i, j);
        }
        let a = sums[own] / (cluster_sizes[own] - 1) as f64;
        let mut b = f64::INFINITY;
        for (c, &sum) in sums.iter().enumerate() {
            if c != own && cluster_sizes[c] > 0 {
                b = b.min(sum / cluster_sizes[c] as f64);
            }
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / indices.len() as f64)
}

/// Two-stage model search: per cluster count keep the seed that maximizes
/// log-likelihood, then pick the count with the best silhouette.
pub fn search_clustering(
    matrix: &FeatureMatrix,
    k_range: (usize, usize),
    seeds_per_k: usize,
    seed: u64,
) -> Result<ClusterModel> {
    search_clustering_with(matrix, k_range, seeds_per_k, seed, FitOptions::default())
}

pub fn search_clustering_with(
    matrix: &FeatureMatrix,
    k_range: (usize, usize),
    seeds_per_k: usize,
    seed: u64,
    opts: FitOptions,
) -> Result<ClusterModel> {
    let (k_min, k_max) = k_range;
    let rows = matrix.rows();
    if k_min == 0 || k_min > k_max {
        return Err(Error::InvalidInput(format!(
            "invalid k_range [{k_min}, {k_max}]"
        )));
    }
    if k_max > rows {
        return Err(Error::KRangeExceedsRows { k_min, k_max, rows });
    }
    if seeds_per_k == 0 {
        return Err(Error::InvalidInput("seeds_per_k must be >= 1".into()));
    }

    // Independent (k, restart) fits; reduced in (k, restart) order.
    let jobs: Vec<(usize, u64)> = (k_min..=k_max)
        .flat_map(|k| {
            (0..seeds_per_k).map(move |j| {
                (
                    k,
                    derive_seed_indexed(seed, "gmm-search", ((k as u64) << 20) | j as u64),
                )
            })
        })
        .collect();
    let fits: Vec<(usize, u64, Result<GmmFit>)> = jobs
        .into_par_iter()
        .map(|(k, s)| {
            let fit = fit_gmm(matrix, k, s, opts);
            (k, s, fit)
        })
        .collect();

    let mut search_log = Vec::new();
    let mut best: Option<(ClusterModel, f64)> = None;
    for k in k_min..=k_max {
        let mut winner: Option<(u64, GmmFit)> = None;
        for (fk, s, fit) in &fits {
            if *fk != k {
                continue;
            }
            match fit {
                Ok(f) => {
                    if winner
                        .as_ref()
                        .map(|(_, w)| f.log_likelihood > w.log_likelihood)
                        .unwrap_or(true)
                    {
                        winner = Some((*s, f.clone()));
                    }
                }
                Err(e) => log::warn!("gmm fit failed for k = {k} seed {s}: {e}"),
            }
        }
        let Some((best_seed, fit)) = winner else {
            log::warn!("all fits failed for k = {k}; skipping");
            continue;
        };
        let sil = match silhouette_score(matrix, &fit.labels) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("silhouette undefined for k = {k}: {e}; skipping");
                continue;
            }
        };
        search_log.push(SearchEntry {
            k,
            best_seed,
            log_likelihood: fit.log_likelihood,
            silhouette: sil,
        });
        let better = best.as_ref().map(|(_, s)| sil > *s).unwrap_or(true);
        if better {
            best = Some((
                ClusterModel {
                    params: fit.params,
                    trace_ids: matrix.trace_ids.clone(),
                    labels: fit.labels,
                    log_likelihood: fit.log_likelihood,
                    silhouette: sil,
                    search_log: Vec::new(),
                },
                sil,
            ));
        }
    }

    match best {
        Some((mut model, _)) => {
            model.search_log = search_log;
            Ok(model)
        }
        None => Err(Error::Clustering(
            "no cluster count produced a usable model".into(),
        )),
    }
}

/// Fraction of points whose cluster's majority ground-truth class matches
/// their own; invariant under relabeling.
pub fn cluster_purity(labels: &[usize], classes: &[String]) -> f64 {
    assert_eq!(labels.len(), classes.len());
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts: std::collections::HashMap<usize, std::collections::HashMap<&str, usize>> =
        std::collections::HashMap::new();
    for (l, c) in labels.iter().zip(classes) {
        *counts.entry(*l).or_default().entry(c.as_str()).or_insert(0) += 1;
    }
    let majority: usize = counts
        .values()
        .map(|m| m.values().copied().max().unwrap_or(0))
        .sum();
    majority as f64 / labels.len() as f64
}

/// Serialized form of a cluster model with labels keyed by trace id.
#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterModelFile {
    pub schema_version: u32,
    pub params: GmmParams,
    pub labels_by_id: std::collections::BTreeMap<String, usize>,
    pub log_likelihood: f64,
    pub silhouette: f64,
    pub search_log: Vec<SearchEntry>,
}

impl ClusterModel {
    pub fn to_file(&self) -> ClusterModelFile {
        ClusterModelFile {
            schema_version: 1,
            params: self.params.clone(),
            labels_by_id: self
                .trace_ids
                .iter()
                .cloned()
                .zip(self.labels.iter().copied())
                .collect(),
            log_likelihood: self.log_likelihood,
            silhouette: self.silhouette,
            search_log: self.search_log.clone(),
        }
    }

    pub fn from_file(file: ClusterModelFile) -> ClusterModel {
        let (trace_ids, labels): (Vec<String>, Vec<usize>) = file.labels_by_id.into_iter().unzip();
        ClusterModel {
            params: file.params,
            trace_ids,
            labels,
            log_likelihood: file.log_likelihood,
            silhouette: file.silhouette,
            search_log: file.search_log,
        }
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(&self.to_file())
            .map_err(|e| Error::malformed(path, e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<ClusterModel> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ClusterModelFile =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        Ok(ClusterModel::from_file(file))
    }
}
