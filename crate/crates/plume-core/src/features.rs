//! Per-trace statistical features.
//!
//! The catalog covers central tendency (mean, quantiles, truncated means),
//! spread (sigma ratios, variation coefficient), and temporal structure
//! (spectral centroid, second differences, truncated mean absolute change,
//! autocorrelations). Undefined statistics are imputed with 0 so downstream
//! clustering never sees missing values.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{Trace, TraceDataset, TraceKind};

/// One feature in the catalog, with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum FeatureSpec {
    Mean,
    /// Quantile at level `q` (linear interpolation between closest ranks).
    Quantile {
        q: f64,
    },
    /// Mean of values between the `q` and `1 - q` quantiles, inclusive.
    TruncatedMean {
        q: f64,
    },
    /// Centroid (in bin index) of the absolute Fourier transform spectrum.
    SpectralCentroid,
    /// Fraction of values more than `r` standard deviations from the mean.
    RatioBeyondSigma {
        r: f64,
    },
    /// std / mean; 0 for zero-mean series.
    VariationCoefficient,
    /// Mean of the central second differences `v[i+1] - 2 v[i] + v[i-1]`.
    MeanSecondDifference,
    /// Mean |change| over changes within the `[lo, hi]` percentiles of the
    /// change series.
    TruncatedMeanAbsChange {
        lo: f64,
        hi: f64,
    },
    /// Autocorrelation at `lag`, biased normalization (divide by N and by
    /// the overall variance).
    Autocorrelation {
        lag: usize,
    },
    /// Pass-through of a named parameter for tuple traces.
    Param {
        key: String,
    },
}

impl FeatureSpec {
    /// Stable label used in CSV headers and reports.
    pub fn label(&self) -> String {
        fn pct(q: f64) -> String {
            let p = q * 100.0;
            if (p - p.round()).abs() < 1e-9 {
                format!("{}", p.round() as i64)
            } else {
                format!("{p}")
            }
        }
        match self {
            FeatureSpec::Mean => "mean".into(),
            FeatureSpec::Quantile { q } => format!("quantile_p{}", pct(*q)),
            FeatureSpec::TruncatedMean { q } => format!("truncated_mean_p{}", pct(*q)),
            FeatureSpec::SpectralCentroid => "spectral_centroid".into(),
            FeatureSpec::RatioBeyondSigma { r } => format!("ratio_beyond_{r}_sigma"),
            FeatureSpec::VariationCoefficient => "variation_coefficient".into(),
            FeatureSpec::MeanSecondDifference => "mean_second_difference".into(),
            FeatureSpec::TruncatedMeanAbsChange { lo, hi } => {
                format!("trunc_mean_abs_change_p{}_p{}", pct(*lo), pct(*hi))
            }
            FeatureSpec::Autocorrelation { lag } => format!("autocorrelation_lag{lag}"),
            FeatureSpec::Param { key } => format!("param_{key}"),
        }
    }

    /// Inverse of [`label`](Self::label).
    pub fn parse_label(label: &str) -> Result<FeatureSpec> {
        fn unpct(s: &str) -> Option<f64> {
            s.parse::<f64>().ok().map(|p| p / 100.0)
        }
        let spec = if label == "mean" {
            FeatureSpec::Mean
        } else if label == "spectral_centroid" {
            FeatureSpec::SpectralCentroid
        } else if label == "variation_coefficient" {
            FeatureSpec::VariationCoefficient
        } else if label == "mean_second_difference" {
            FeatureSpec::MeanSecondDifference
        } else if let Some(rest) = label.strip_prefix("quantile_p") {
            FeatureSpec::Quantile {
                q: unpct(rest).ok_or_else(|| bad_label(label))?,
            }
        } else if let Some(rest) = label.strip_prefix("truncated_mean_p") {
            FeatureSpec::TruncatedMean {
                q: unpct(rest).ok_or_else(|| bad_label(label))?,
            }
        } else if let Some(rest) = label.strip_prefix("ratio_beyond_") {
            let r = rest
                .strip_suffix("_sigma")
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad_label(label))?;
            FeatureSpec::RatioBeyondSigma { r }
        } else if let Some(rest) = label.strip_prefix("trunc_mean_abs_change_p") {
            let (lo, hi) = rest.split_once("_p").ok_or_else(|| bad_label(label))?;
            FeatureSpec::TruncatedMeanAbsChange {
                lo: unpct(lo).ok_or_else(|| bad_label(label))?,
                hi: unpct(hi).ok_or_else(|| bad_label(label))?,
            }
        } else if let Some(rest) = label.strip_prefix("autocorrelation_lag") {
            FeatureSpec::Autocorrelation {
                lag: rest.parse().map_err(|_| bad_label(label))?,
            }
        } else if let Some(key) = label.strip_prefix("param_") {
            FeatureSpec::Param { key: key.into() }
        } else {
            return Err(bad_label(label));
        };
        Ok(spec)
    }
}

fn bad_label(label: &str) -> Error {
    Error::InvalidInput(format!("unknown feature label `{label}`"))
}

impl fmt::Display for FeatureSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// The full 17-row feature catalog for series traces.
pub fn catalog() -> Vec<FeatureSpec> {
    use FeatureSpec::*;
    vec![
        Mean,
        Quantile { q: 0.025 },
        Quantile { q: 0.05 },
        Quantile { q: 0.95 },
        TruncatedMean { q: 0.05 },
        TruncatedMean { q: 0.125 },
        TruncatedMean { q: 0.25 },
        SpectralCentroid,
        RatioBeyondSigma { r: 1.0 },
        RatioBeyondSigma { r: 2.5 },
        VariationCoefficient,
        MeanSecondDifference,
        TruncatedMeanAbsChange { lo: 0.05, hi: 0.95 },
        TruncatedMeanAbsChange {
            lo: 0.0125,
            hi: 0.9875,
        },
        Autocorrelation { lag: 3 },
        Autocorrelation { lag: 4 },
        Autocorrelation { lag: 8 },
    ]
}

/// Default specs for a dataset: the catalog for series traces, the union of
/// parameter names (sorted) for tuple traces.
pub fn default_specs(dataset: &TraceDataset) -> Vec<FeatureSpec> {
    match dataset.kind() {
        Some(TraceKind::ParamTuple) => {
            let mut keys: Vec<String> = dataset
                .traces
                .iter()
                .flat_map(|t| t.params.iter().flat_map(|p| p.keys().cloned()))
                .collect();
            keys.sort();
            keys.dedup();
            keys.into_iter()
                .map(|key| FeatureSpec::Param { key })
                .collect()
        }
        _ => catalog(),
    }
}

/// One trace's feature values, aligned to the specs they were computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureVector {
    pub trace_id: String,
    pub values: Vec<(FeatureSpec, f64)>,
}

/// Dataset-level feature matrix, z-scored with constant columns dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// Columns that survived degenerate-column removal.
    pub specs: Vec<FeatureSpec>,
    pub trace_ids: Vec<String>,
    /// Standardized values, rows aligned to `trace_ids`.
    pub data: Array2<f64>,
    /// Per-column (mean, std) of the raw values behind each kept column.
    pub standardization: Vec<(f64, f64)>,
    /// Constant columns removed during standardization.
    pub dropped: Vec<FeatureSpec>,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    /// Standardize raw per-trace rows, dropping constant columns.
    pub fn from_raw(
        specs: Vec<FeatureSpec>,
        trace_ids: Vec<String>,
        raw: Array2<f64>,
    ) -> Result<FeatureMatrix> {
        assert_eq!(raw.nrows(), trace_ids.len());
        assert_eq!(raw.ncols(), specs.len());
        if raw.nrows() == 0 {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        if raw.nrows() == 1 {
            // A single row cannot be z-scored; keep it as-is so the caller's
            // own size checks can fire.
            let cols = specs.len();
            return Ok(FeatureMatrix {
                specs,
                trace_ids,
                data: raw,
                standardization: vec![(0.0, 1.0); cols],
                dropped: vec![],
            });
        }
        let n = raw.nrows() as f64;
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut standardization = Vec::new();
        for (j, spec) in specs.iter().enumerate() {
            let col = raw.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std <= 1e-12 * (1.0 + mean.abs()) {
                dropped.push(spec.clone());
            } else {
                kept.push((j, spec.clone()));
                standardization.push((mean, std));
            }
        }
        if kept.is_empty() {
            return Err(Error::NoInformativeFeatures);
        }
        let mut data = Array2::zeros((raw.nrows(), kept.len()));
        for (out_j, &(j, _)) in kept.iter().enumerate() {
            let (mean, std) = standardization[out_j];
            for i in 0..raw.nrows() {
                data[(i, out_j)] = (raw[(i, j)] - mean) / std;
            }
        }
        Ok(FeatureMatrix {
            specs: kept.into_iter().map(|(_, s)| s).collect(),
            trace_ids,
            data,
            standardization,
            dropped,
        })
    }

    /// Restrict to the named specs (e.g. the survivors of feature
    /// selection), keeping column order as given.
    pub fn select_specs(&self, specs: &[FeatureSpec]) -> Result<FeatureMatrix> {
        let keep: Vec<usize> = specs
            .iter()
            .map(|s| {
                self.specs
                    .iter()
                    .position(|m| m == s)
                    .ok_or_else(|| Error::InvalidInput(format!("spec `{s}` not in matrix")))
            })
            .collect::<Result<_>>()?;
        Ok(self.select_columns(&keep))
    }

    /// Restrict to a subset of columns (by index into `specs`), keeping the
    /// standardization metadata aligned.
    pub fn select_columns(&self, keep: &[usize]) -> FeatureMatrix {
        let mut data = Array2::zeros((self.rows(), keep.len()));
        for (out_j, &j) in keep.iter().enumerate() {
            data.column_mut(out_j).assign(&self.data.column(j));
        }
        FeatureMatrix {
            specs: keep.iter().map(|&j| self.specs[j].clone()).collect(),
            trace_ids: self.trace_ids.clone(),
            data,
            standardization: keep.iter().map(|&j| self.standardization[j]).collect(),
            dropped: self.dropped.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// scalar statistics
// ---------------------------------------------------------------------------

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn population_std(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Quantile by linear interpolation between closest ranks.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&sorted, q)
}

fn truncated_mean(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = quantile_sorted(&sorted, q);
    let hi = quantile_sorted(&sorted, 1.0 - q);
    let kept: Vec<f64> = sorted
        .iter()
        .copied()
        .filter(|&v| v >= lo && v <= hi)
        .collect();
    mean(&kept)
}

fn spectral_centroid(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut buf: Vec<Complex<f64>> = values.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    // Real input: keep the non-redundant half of the spectrum.
    let bins = n / 2 + 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, c) in buf.iter().take(bins).enumerate() {
        let m = c.norm();
        num += i as f64 * m;
        den += m;
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn ratio_beyond_sigma(values: &[f64], r: f64) -> f64 {
    let m = mean(values);
    let s = population_std(values);
    let count = values.iter().filter(|&&v| (v - m).abs() > r * s).count();
    count as f64 / values.len() as f64
}

fn variation_coefficient(values: &[f64]) -> f64 {
    let m = mean(values);
    if m == 0.0 {
        0.0
    } else {
        population_std(values) / m
    }
}

fn mean_second_difference(values: &[f64]) -> f64 {
    if values.len() < 3 {
        return 0.0;
    }
    let diffs: Vec<f64> = values
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .collect();
    mean(&diffs)
}

fn truncated_mean_abs_change(values: &[f64], lo: f64, hi: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let changes: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
    let lo_v = quantile(&changes, lo);
    let hi_v = quantile(&changes, hi);
    let kept: Vec<f64> = changes
        .iter()
        .copied()
        .filter(|&d| d >= lo_v && d <= hi_v)
        .map(f64::abs)
        .collect();
    mean(&kept)
}

fn autocorrelation(values: &[f64], lag: usize) -> f64 {
    let n = values.len();
    if n <= lag {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return 0.0;
    }
    let cov = (0..n - lag)
        .map(|t| (values[t] - m) * (values[t + lag] - m))
        .sum::<f64>()
        / n as f64;
    cov / var
}

// ---------------------------------------------------------------------------
// extraction
// ---------------------------------------------------------------------------

/// Resample to a uniform grid at the median step by previous-value
/// interpolation. Uniformly spaced input is returned as-is.
fn uniform_values(samples: &[(f64, f64)]) -> Vec<f64> {
    if samples.len() < 3 {
        return samples.iter().map(|&(_, v)| v).collect();
    }
    let mut steps: Vec<f64> = samples.windows(2).map(|w| w[1].0 - w[0].0).collect();
    steps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = quantile_sorted(&steps, 0.5);
    let uniform = steps
        .iter()
        .all(|&s| (s - median).abs() <= 1e-9 * median.max(1e-12));
    if uniform {
        return samples.iter().map(|&(_, v)| v).collect();
    }
    let t0 = samples[0].0;
    let t_end = samples[samples.len() - 1].0;
    let count = ((t_end - t0) / median).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut src = 0usize;
    for i in 0..count {
        let t = t0 + i as f64 * median;
        while src + 1 < samples.len() && samples[src + 1].0 <= t {
            src += 1;
        }
        out.push(samples[src].1);
    }
    out
}

fn eval_spec(spec: &FeatureSpec, values: &[f64]) -> f64 {
    let v = match spec {
        FeatureSpec::Mean => mean(values),
        FeatureSpec::Quantile { q } => quantile(values, *q),
        FeatureSpec::TruncatedMean { q } => truncated_mean(values, *q),
        FeatureSpec::SpectralCentroid => spectral_centroid(values),
        FeatureSpec::RatioBeyondSigma { r } => ratio_beyond_sigma(values, *r),
        FeatureSpec::VariationCoefficient => variation_coefficient(values),
        FeatureSpec::MeanSecondDifference => mean_second_difference(values),
        FeatureSpec::TruncatedMeanAbsChange { lo, hi } => {
            truncated_mean_abs_change(values, *lo, *hi)
        }
        FeatureSpec::Autocorrelation { lag } => autocorrelation(values, *lag),
        FeatureSpec::Param { .. } => unreachable!("param specs handled by caller"),
    };
    // Imputation guarantee: downstream never sees a non-finite value.
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// Compute one feature vector for a trace.
///
/// Series traces need at least 2 samples; tuple traces pass their parameters
/// through (every spec must be a `Param`).
pub fn extract_features(trace: &Trace, specs: &[FeatureSpec]) -> Result<FeatureVector> {
    match trace.kind {
        TraceKind::ParamTuple => {
            let params = trace.params.as_ref().ok_or_else(|| {
                Error::invalid_trace(&trace.id, "param_tuple trace has no params")
            })?;
            let mut values = Vec::with_capacity(specs.len());
            for spec in specs {
                let FeatureSpec::Param { key } = spec else {
                    return Err(Error::invalid_trace(
                        &trace.id,
                        format!("statistic `{spec}` undefined for param_tuple traces"),
                    ));
                };
                let v = *params.get(key).ok_or_else(|| {
                    Error::invalid_trace(&trace.id, format!("missing param `{key}`"))
                })?;
                values.push((spec.clone(), v));
            }
            Ok(FeatureVector {
                trace_id: trace.id.clone(),
                values,
            })
        }
        _ => {
            if trace.samples.len() < 2 {
                return Err(Error::invalid_trace(
                    &trace.id,
                    "feature extraction needs at least 2 samples",
                ));
            }
            let values = uniform_values(&trace.samples);
            let out = specs
                .iter()
                .map(|s| (s.clone(), eval_spec(s, &values)))
                .collect();
            Ok(FeatureVector {
                trace_id: trace.id.clone(),
                values: out,
            })
        }
    }
}

/// Extract every trace's raw feature vector, in dataset order.
pub fn extract_vectors(
    dataset: &TraceDataset,
    specs: &[FeatureSpec],
) -> Result<Vec<FeatureVector>> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    dataset
        .traces
        .par_iter()
        .map(|t| extract_features(t, specs))
        .collect()
}

/// Standardize raw feature vectors into a [`FeatureMatrix`].
pub fn matrix_from_vectors(
    specs: &[FeatureSpec],
    vectors: &[FeatureVector],
) -> Result<FeatureMatrix> {
    let mut raw = Array2::zeros((vectors.len(), specs.len()));
    for (i, fv) in vectors.iter().enumerate() {
        for (j, (_, v)) in fv.values.iter().enumerate() {
            raw[(i, j)] = *v;
        }
    }
    let ids = vectors.iter().map(|fv| fv.trace_id.clone()).collect();
    FeatureMatrix::from_raw(specs.to_vec(), ids, raw)
}

/// Extract every trace's features and standardize into a [`FeatureMatrix`].
pub fn extract_matrix(dataset: &TraceDataset, specs: &[FeatureSpec]) -> Result<FeatureMatrix> {
    let vectors = extract_vectors(dataset, specs)?;
    matrix_from_vectors(specs, &vectors)
}

// ---------------------------------------------------------------------------
// CSV export / import (raw, unstandardized values)
// ---------------------------------------------------------------------------

pub const FEATURES_SCHEMA: &str = "# schema=plume.features.v1";

/// Write raw feature vectors as CSV: schema line, header of labels, one row
/// per trace.
pub fn write_feature_csv<W: std::io::Write>(
    mut w: W,
    specs: &[FeatureSpec],
    rows: &[FeatureVector],
) -> std::io::Result<()> {
    writeln!(w, "{FEATURES_SCHEMA}")?;
    let header: Vec<String> = std::iter::once("trace_id".to_string())
        .chain(specs.iter().map(|s| s.label()))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let mut line = row.trace_id.clone();
        for (_, v) in &row.values {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read a raw feature CSV back into specs, ids, and a raw value matrix.
pub fn read_feature_csv(path: &Path) -> Result<(Vec<FeatureSpec>, Vec<String>, Array2<f64>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::malformed(path, e.to_string()))?
        .clone();
    if headers.is_empty() || &headers[0] != "trace_id" {
        return Err(Error::malformed(path, "first column must be trace_id"));
    }
    let specs: Vec<FeatureSpec> = headers
        .iter()
        .skip(1)
        .map(FeatureSpec::parse_label)
        .collect::<Result<_>>()?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::malformed(path, e.to_string()))?;
        if record.len() != specs.len() + 1 {
            return Err(Error::malformed(
                path,
                format!("row for `{}` has wrong arity", &record[0]),
            ));
        }
        ids.push(record[0].to_string());
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::malformed(path, format!("bad number `{field}`")))?;
            values.push(v);
        }
    }
    if ids.is_empty() {
        return Err(Error::malformed(path, "no data rows"));
    }
    let raw = Array2::from_shape_vec((ids.len(), specs.len()), values)
        .map_err(|e| Error::malformed(path, e.to_string()))?;
    Ok((specs, ids, raw))
}
