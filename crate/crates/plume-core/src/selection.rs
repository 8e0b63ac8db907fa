//! Critical feature identification: a cycle of clustering, single-feature
//! classification, and elimination that keeps only features with high
//! information gain about the cluster structure.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{fit_gmm, FitOptions};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureSpec};
use crate::rng::derive_seed;

/// Controls for the selection loop.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub initial_cluster_count: usize,
    /// Clusters added per round as the feature set shrinks.
    pub cluster_growth: usize,
    /// Fraction of surviving features dropped per round (at least one).
    pub elimination_fraction: f64,
    pub min_features: usize,
    /// Stop once every surviving feature has IG >= threshold * H(labels).
    pub ig_threshold: f64,
    pub tree_max_depth: usize,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            initial_cluster_count: 4,
            cluster_growth: 2,
            elimination_fraction: 0.25,
            min_features: 4,
            ig_threshold: 0.5,
            tree_max_depth: 3,
            seed: 0,
        }
    }
}

impl SelectionConfig {
    fn validate(&self) -> Result<()> {
        if self.min_features < 2 {
            return Err(Error::InvalidInput("min_features must be >= 2".into()));
        }
        if !(self.elimination_fraction > 0.0 && self.elimination_fraction < 1.0) {
            return Err(Error::InvalidInput(
                "elimination_fraction must be in (0, 1)".into(),
            ));
        }
        if self.initial_cluster_count < 2 {
            return Err(Error::InvalidInput(
                "initial_cluster_count must be >= 2".into(),
            ));
        }
        if self.tree_max_depth == 0 {
            return Err(Error::InvalidInput("tree_max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// One round of the loop: what survived and what it scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionRound {
    pub cluster_count: usize,
    pub surviving: Vec<FeatureSpec>,
    /// Information gain in bits, aligned to `surviving`.
    pub info_gain: Vec<f64>,
    /// Shannon entropy of the round's cluster labels, bits.
    pub label_entropy: f64,
    /// Clustering collapsed to a single label; IG is uninformative.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionReport {
    pub schema_version: u32,
    pub rounds: Vec<SelectionRound>,
    pub final_specs: Vec<FeatureSpec>,
}

impl SelectionReport {
    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes =
            serde_json::to_vec_pretty(self).map_err(|e| Error::malformed(path, e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &std::path::Path) -> Result<SelectionReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
    }
}

fn entropy_bits(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Recursively split a (value-sorted) slice of label-carrying points and
/// accumulate weighted leaf entropy. Greedy: each node takes the threshold
/// minimizing the children's weighted entropy; nodes stop at `depth` 0, on
/// purity, or when no split improves.
fn leaf_entropy(
    pairs: &[(f64, usize)],
    n_labels: usize,
    total: usize,
    depth: usize,
    acc: &mut f64,
) {
    let n = pairs.len();
    let mut counts = vec![0usize; n_labels];
    for &(_, l) in pairs {
        counts[l] += 1;
    }
    let here = entropy_bits(&counts, n);
    if depth == 0 || here == 0.0 || n < 2 {
        *acc += (n as f64 / total as f64) * here;
        return;
    }

    // Scan boundaries between distinct values using prefix label counts.
    let mut best: Option<(usize, f64)> = None;
    let mut prefix = vec![0usize; n_labels];
    for i in 0..n - 1 {
        prefix[pairs[i].1] += 1;
        if pairs[i].0 == pairs[i + 1].0 {
            continue;
        }
        let left = entropy_bits(&prefix, i + 1);
        let right: f64 = {
            let mut rest = counts.clone();
            for (r, p) in rest.iter_mut().zip(&prefix) {
                *r -= p;
            }
            entropy_bits(&rest, n - i - 1)
        };
        let weighted = ((i + 1) as f64 * left + (n - i - 1) as f64 * right) / n as f64;
        if best.map(|(_, w)| weighted < w).unwrap_or(true) {
            best = Some((i + 1, weighted));
        }
    }
    match best {
        Some((split, weighted)) if weighted < here - 1e-12 => {
            leaf_entropy(&pairs[..split], n_labels, total, depth - 1, acc);
            leaf_entropy(&pairs[split..], n_labels, total, depth - 1, acc);
        }
        _ => *acc += (n as f64 / total as f64) * here,
    }
}

/// Information gain `H(labels) - H(labels | feature)` in bits, where the
/// conditional entropy is the leaf-weighted entropy of a depth-bounded
/// threshold tree fit on the single feature.
///
/// A single distinct label is degenerate and yields 0.
pub fn information_gain(labels: &[usize], column: &[f64], tree_max_depth: usize) -> f64 {
    assert_eq!(labels.len(), column.len(), "labels and column must align");
    let n = labels.len();
    if n < 2 {
        return 0.0;
    }
    let n_labels = labels.iter().copied().max().unwrap_or(0) + 1;
    let mut counts = vec![0usize; n_labels];
    for &l in labels {
        counts[l] += 1;
    }
    let h = entropy_bits(&counts, n);
    if h == 0.0 {
        log::debug!("information_gain: single distinct label, degenerate");
        return 0.0;
    }
    let mut pairs: Vec<(f64, usize)> = column.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut cond = 0.0;
    leaf_entropy(&pairs, n_labels, n, tree_max_depth, &mut cond);
    (h - cond).max(0.0)
}

/// Run the cluster / classify / eliminate loop until every surviving feature
/// carries high information gain or the feature floor is reached.
pub fn select_critical_features(
    matrix: &FeatureMatrix,
    cfg: &SelectionConfig,
) -> Result<SelectionReport> {
    cfg.validate()?;
    if matrix.cols() < cfg.min_features {
        return Err(Error::InvalidInput(format!(
            "matrix has {} columns, fewer than min_features = {}",
            matrix.cols(),
            cfg.min_features
        )));
    }

    // The selection-stage clustering is deliberately cheap: one fixed stage
    // seed, no silhouette search. A handful of EM restarts (best by
    // log-likelihood, all derived from that seed) keeps local optima from
    // corrupting the IG signal.
    const SELECTION_RESTARTS: u64 = 8;
    let gmm_seed = derive_seed(cfg.seed, "selection-gmm");
    let mut surviving: Vec<usize> = (0..matrix.cols()).collect();
    let mut rounds = Vec::new();

    for round_idx in 0.. {
        let k = (cfg.initial_cluster_count + cfg.cluster_growth * round_idx).min(matrix.rows());
        let sub = matrix.select_columns(&surviving);
        let mut fit = None;
        let mut last_err = None;
        for restart in 0..SELECTION_RESTARTS {
            let seed = crate::rng::derive_seed_indexed(
                gmm_seed,
                "restart",
                ((round_idx as u64) << 8) | restart,
            );
            match fit_gmm(&sub, k, seed, FitOptions::default()) {
                Ok(f) => {
                    let better = fit
                        .as_ref()
                        .map(|best: &crate::clustering::GmmFit| {
                            f.log_likelihood > best.log_likelihood
                        })
                        .unwrap_or(true);
                    if better {
                        fit = Some(f);
                    }
                }
                Err(e) => last_err = Some(e),
            }
        }
        let fit = fit.ok_or_else(|| Error::Selection {
            round: round_idx,
            source: Box::new(
                last_err.unwrap_or_else(|| Error::Clustering("no restart converged".into())),
            ),
        })?;

        let mut counts = vec![0usize; k];
        for &l in &fit.labels {
            counts[l] += 1;
        }
        let h = entropy_bits(&counts, fit.labels.len());
        let degenerate = h == 0.0;

        let igs: Vec<f64> = (0..surviving.len())
            .into_par_iter()
            .map(|j| {
                let col: Vec<f64> = sub.data.column(j).to_vec();
                information_gain(&fit.labels, &col, cfg.tree_max_depth)
            })
            .collect();

        rounds.push(SelectionRound {
            cluster_count: k,
            surviving: surviving.iter().map(|&j| matrix.specs[j].clone()).collect(),
            info_gain: igs.clone(),
            label_entropy: h,
            degenerate,
        });

        let all_high = !degenerate && igs.iter().all(|&g| g >= cfg.ig_threshold * h);
        if all_high || surviving.len() <= cfg.min_features {
            break;
        }

        let mut n_drop = ((surviving.len() as f64) * cfg.elimination_fraction).floor() as usize;
        n_drop = n_drop.max(1).min(surviving.len() - cfg.min_features);
        // Lowest IG first; ties broken by catalog order.
        let mut order: Vec<usize> = (0..surviving.len()).collect();
        order.sort_by(|&a, &b| {
            igs[a]
                .partial_cmp(&igs[b])
                .unwrap()
                .then(surviving[a].cmp(&surviving[b]))
        });
        let drop: Vec<usize> = order[..n_drop].iter().map(|&i| surviving[i]).collect();
        surviving.retain(|j| !drop.contains(j));
    }

    let final_specs: Vec<FeatureSpec> =
        surviving.iter().map(|&j| matrix.specs[j].clone()).collect();

    Ok(SelectionReport {
        schema_version: 1,
        rounds,
        final_specs,
    })
}
