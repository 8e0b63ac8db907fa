//! Independent oracles shared by the integration and acceptance suites.
//! Everything here is written straight from textbook definitions and stays
//! independent of the implementation paths it checks.

#![allow(dead_code)]
#![allow(clippy::needless_range_loop)]

use plume_core::features::FeatureSpec;

/// Brute-force implementations of the feature catalog.
pub mod feature_oracle {
    /// Arithmetic mean.
    pub fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Population standard deviation.
    pub fn std(v: &[f64]) -> f64 {
        let m = mean(v);
        (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
    }

    /// Quantile with linear interpolation between closest ranks.
    pub fn quantile(v: &[f64], q: f64) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let rank = q * (s.len() as f64 - 1.0);
        let below = rank.floor() as usize;
        let above = rank.ceil() as usize;
        let weight = rank - below as f64;
        s[below] * (1.0 - weight) + s[above] * weight
    }

    /// Mean of values within the [q, 1-q] quantile band, inclusive.
    pub fn truncated_mean(v: &[f64], q: f64) -> f64 {
        let lo = quantile(v, q);
        let hi = quantile(v, 1.0 - q);
        let kept: Vec<f64> = v.iter().copied().filter(|&x| x >= lo && x <= hi).collect();
        if kept.is_empty() {
            0.0
        } else {
            mean(&kept)
        }
    }

    /// Centroid of the absolute spectrum from a direct O(n^2) DFT over the
    /// non-redundant bins.
    pub fn spectral_centroid(v: &[f64]) -> f64 {
        let n = v.len();
        let mut weighted = 0.0;
        let mut total = 0.0;
        for k in 0..=n / 2 {
            let mut re = 0.0;
            let mut im = 0.0;
            for (t, &x) in v.iter().enumerate() {
                let angle = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                re += x * angle.cos();
                im += x * angle.sin();
            }
            let magnitude = (re * re + im * im).sqrt();
            weighted += k as f64 * magnitude;
            total += magnitude;
        }
        if total > 0.0 {
            weighted / total
        } else {
            0.0
        }
    }

    pub fn ratio_beyond_sigma(v: &[f64], r: f64) -> f64 {
        let m = mean(v);
        let s = std(v);
        v.iter().filter(|&&x| (x - m).abs() > r * s).count() as f64 / v.len() as f64
    }

    pub fn variation_coefficient(v: &[f64]) -> f64 {
        let m = mean(v);
        if m == 0.0 {
            0.0
        } else {
            std(v) / m
        }
    }

    /// Mean of v[i-1] - 2 v[i] + v[i+1] over interior points.
    pub fn mean_second_difference(v: &[f64]) -> f64 {
        if v.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 1..v.len() - 1 {
            acc += v[i - 1] - 2.0 * v[i] + v[i + 1];
        }
        acc / (v.len() - 2) as f64
    }

    /// Mean |delta| over the deltas within the [lo, hi] percentile band of
    /// the (signed) change series.
    pub fn truncated_mean_abs_change(v: &[f64], lo: f64, hi: f64) -> f64 {
        if v.len() < 2 {
            return 0.0;
        }
        let deltas: Vec<f64> = (1..v.len()).map(|i| v[i] - v[i - 1]).collect();
        let lo_bound = quantile(&deltas, lo);
        let hi_bound = quantile(&deltas, hi);
        let kept: Vec<f64> = deltas
            .into_iter()
            .filter(|&d| d >= lo_bound && d <= hi_bound)
            .collect();
        if kept.is_empty() {
            0.0
        } else {
            kept.iter().map(|d| d.abs()).sum::<f64>() / kept.len() as f64
        }
    }

    /// Autocorrelation with biased normalization: covariance summed over
    /// the overlap, divided by N and the population variance.
    pub fn autocorrelation(v: &[f64], lag: usize) -> f64 {
        let n = v.len();
        if n <= lag {
            return 0.0;
        }
        let m = mean(v);
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        if var == 0.0 {
            return 0.0;
        }
        let mut cov = 0.0;
        for t in lag..n {
            cov += (v[t - lag] - m) * (v[t] - m);
        }
        cov / n as f64 / var
    }
}

/// Evaluate one catalog spec with the oracle implementations.
pub fn oracle_value(spec: &FeatureSpec, values: &[f64]) -> f64 {
    use feature_oracle as o;
    match spec {
        FeatureSpec::Mean => o::mean(values),
        FeatureSpec::Quantile { q } => o::quantile(values, *q),
        FeatureSpec::TruncatedMean { q } => o::truncated_mean(values, *q),
        FeatureSpec::SpectralCentroid => o::spectral_centroid(values),
        FeatureSpec::RatioBeyondSigma { r } => o::ratio_beyond_sigma(values, *r),
        FeatureSpec::VariationCoefficient => o::variation_coefficient(values),
        FeatureSpec::MeanSecondDifference => o::mean_second_difference(values),
        FeatureSpec::TruncatedMeanAbsChange { lo, hi } => {
            o::truncated_mean_abs_change(values, *lo, *hi)
        }
        FeatureSpec::Autocorrelation { lag } => o::autocorrelation(values, *lag),
        FeatureSpec::Param { .. } => unreachable!("param specs are pass-through"),
    }
}

/// Naive silhouette from the definition: full pairwise distance matrix,
/// per-point a/b means.
pub fn silhouette_oracle(data: &ndarray::Array2<f64>, labels: &[usize]) -> f64 {
    let n = data.nrows();
    let dist = |a: usize, b: usize| -> f64 {
        data.row(a)
            .iter()
            .zip(data.row(b).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let clusters: Vec<usize> = {
        let mut c = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let same: Vec<usize> = (0..n)
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if same.is_empty() {
            continue; // singleton scores 0
        }
        let a = same.iter().map(|&j| dist(i, j)).sum::<f64>() / same.len() as f64;
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| {
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

/// Deterministic 3-state chain MDP: action 1 advances one state for reward
/// 1, action 0 stays for reward 0; state 2 is terminal.
pub mod chain_mdp {
    pub const STATES: usize = 3;
    pub const ACTIONS: usize = 2;

    pub fn transition(state: usize, action: usize) -> (usize, f64, bool) {
        if action == 1 {
            let next = state + 1;
            (next, 1.0, next == 2)
        } else {
            (state, 0.0, false)
        }
    }

    pub fn one_hot(state: usize) -> Vec<f32> {
        let mut v = vec![0.0; STATES];
        v[state] = 1.0;
        v
    }

    /// Exact Q values by value iteration.
    pub fn value_iteration(gamma: f64) -> [[f64; ACTIONS]; 2] {
        let mut q = [[0.0f64; ACTIONS]; 2];
        for _ in 0..1000 {
            let v = [q[0][0].max(q[0][1]), q[1][0].max(q[1][1])];
            for s in 0..2 {
                for a in 0..ACTIONS {
                    let (next, reward, done) = transition(s, a);
                    let future = if done { 0.0 } else { gamma * v[next] };
                    q[s][a] = reward + future;
                }
            }
        }
        q
    }
}

/// Upper-tail p-value of a chi-square statistic.
pub fn chi_square_p(statistic: f64, dof: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    1.0 - dist.cdf(statistic)
}

/// 4-sigma multinomial bound check: every observed category frequency is
/// within 4 standard errors of its expected probability.
pub fn within_multinomial_bounds(counts: &[u64], probs: &[f64], draws: u64) -> bool {
    counts.iter().zip(probs).all(|(&c, &p)| {
        let sigma = (p * (1.0 - p) / draws as f64).sqrt();
        let freq = c as f64 / draws as f64;
        (freq - p).abs() <= 4.0 * sigma.max(1e-12)
    })
}
