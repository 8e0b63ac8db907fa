//! Core trace and dataset types plus manifest I/O.
//!
//! A [`Trace`] is the unit of sampling: a time series of `(t, v)` samples
//! (throughput or job sizes) or a bare parameter tuple. Datasets are stored
//! as one JSON object per trace plus a manifest listing relative paths.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// What the sample values of a trace mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// Link throughput over time, MB/s.
    ThroughputSeries,
    /// Job sizes over arrival times.
    JobSizeSeries,
    /// No time series; the trace is a tuple of named parameters.
    ParamTuple,
}

impl TraceKind {
    pub fn is_series(self) -> bool {
        !matches!(self, TraceKind::ParamTuple)
    }
}

/// A logged input process replayed by the simulator during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trace {
    pub id: String,
    pub kind: TraceKind,
    /// `(t seconds, value)` pairs, strictly increasing in `t`.
    pub samples: Vec<(f64, f64)>,
    /// Named parameters for `ParamTuple` traces.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BTreeMap<String, f64>>,
    /// Generator label; used for evaluation breakdowns only, never training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_class: Option<String>,
}

impl Trace {
    /// Validate the per-trace invariants, naming the trace in any error.
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TraceKind::ParamTuple => {
                if !self.samples.is_empty() {
                    return Err(Error::invalid_trace(
                        &self.id,
                        "param_tuple traces must have no samples",
                    ));
                }
                match &self.params {
                    Some(p) if !p.is_empty() => {
                        for (k, v) in p {
                            if !v.is_finite() {
                                return Err(Error::invalid_trace(
                                    &self.id,
                                    format!("param `{k}` is not finite"),
                                ));
                            }
                        }
                    }
                    _ => {
                        return Err(Error::invalid_trace(
                            &self.id,
                            "param_tuple traces must have nonempty params",
                        ))
                    }
                }
            }
            TraceKind::ThroughputSeries | TraceKind::JobSizeSeries => {
                if self.samples.is_empty() {
                    return Err(Error::invalid_trace(
                        &self.id,
                        "series trace has no samples",
                    ));
                }
                let mut prev_t = f64::NEG_INFINITY;
                for &(t, v) in &self.samples {
                    if !t.is_finite() || !v.is_finite() {
                        return Err(Error::invalid_trace(&self.id, "non-finite sample"));
                    }
                    if t <= prev_t {
                        return Err(Error::invalid_trace(
                            &self.id,
                            format!("timestamps not strictly increasing at t = {t}"),
                        ));
                    }
                    if v < 0.0 {
                        return Err(Error::invalid_trace(
                            &self.id,
                            format!("negative value {v} at t = {t}"),
                        ));
                    }
                    prev_t = t;
                }
            }
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        self.samples.iter().map(|&(_, v)| v).collect()
    }

    pub fn mean_value(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&(_, v)| v).sum::<f64>() / self.samples.len() as f64
    }

    /// Duration covered by the samples, in seconds.
    pub fn duration(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(&(t0, _)), Some(&(t1, _))) => t1 - t0,
            _ => 0.0,
        }
    }
}

/// A named collection of traces sharing one kind.
#[derive(Debug, Clone)]
pub struct TraceDataset {
    pub name: String,
    pub traces: Vec<Trace>,
    pub manifest_path: Option<PathBuf>,
}

impl TraceDataset {
    /// Build a dataset, validating every trace and the dataset invariants.
    /// Traces are ordered by id.
    pub fn new(name: impl Into<String>, mut traces: Vec<Trace>) -> Result<Self> {
        for t in &traces {
            t.validate()?;
        }
        traces.sort_by(|a, b| a.id.cmp(&b.id));
        for w in traces.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::InvalidInput(format!(
                    "duplicate trace id `{}`",
                    w[0].id
                )));
            }
            if w[0].kind != w[1].kind {
                return Err(Error::InvalidInput(
                    "all traces in a dataset must share one kind".into(),
                ));
            }
        }
        Ok(TraceDataset {
            name: name.into(),
            traces,
            manifest_path: None,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn kind(&self) -> Option<TraceKind> {
        self.traces.first().map(|t| t.kind)
    }

    pub fn trace_by_id(&self, id: &str) -> Option<&Trace> {
        self.traces
            .binary_search_by(|t| t.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.traces[i])
    }

    /// Drop series traces shorter than `min_seconds` of coverage.
    pub fn filter_min_duration(&mut self, min_seconds: f64) {
        self.traces
            .retain(|t| !t.kind.is_series() || t.duration() >= min_seconds);
    }

    /// Split series traces longer than `chunk_count` samples into segments of
    /// exactly `chunk_count` samples so long traces do not dominate training.
    /// The starting offset of the cut is randomized per trace; split points
    /// are deterministic given `seed`. Trailing remainders are dropped.
    pub fn split_long_traces(&self, chunk_count: usize, seed: u64) -> Result<TraceDataset> {
        assert!(chunk_count >= 2, "chunk_count must be at least 2");
        let mut out = Vec::new();
        for trace in &self.traces {
            if !trace.kind.is_series() || trace.samples.len() <= chunk_count {
                out.push(trace.clone());
                continue;
            }
            let mut rng = rng_from_seed(derive_seed(seed, &format!("split:{}", trace.id)));
            let slack = trace.samples.len() % chunk_count;
            let offset = if slack == 0 {
                0
            } else {
                rng.random_range(0..=slack)
            };
            let mut idx = 0usize;
            let mut start = offset;
            while start + chunk_count <= trace.samples.len() {
                out.push(Trace {
                    id: format!("{}#s{idx}", trace.id),
                    kind: trace.kind,
                    samples: trace.samples[start..start + chunk_count].to_vec(),
                    params: trace.params.clone(),
                    ground_truth_class: trace.ground_truth_class.clone(),
                });
                start += chunk_count;
                idx += 1;
            }
        }
        TraceDataset::new(format!("{}-split{}", self.name, chunk_count), out)
    }

    /// Write a per-trace summary CSV: id, kind, sample count, duration, mean,
    /// std, min, max. Starts with a schema-version header line.
    pub fn write_summary_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# schema=plume.trace-summary.v1")?;
        writeln!(w, "id,kind,samples,duration_s,mean,std,min,max")?;
        for t in &self.traces {
            let vals = t.values();
            let n = vals.len() as f64;
            let (mean, std, min, max) = if vals.is_empty() {
                (0.0, 0.0, 0.0, 0.0)
            } else {
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (mean, var.sqrt(), min, max)
            };
            let kind = match t.kind {
                TraceKind::ThroughputSeries => "throughput_series",
                TraceKind::JobSizeSeries => "job_size_series",
                TraceKind::ParamTuple => "param_tuple",
            };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t.id,
                kind,
                t.samples.len(),
                t.duration(),
                mean,
                std,
                min,
                max
            )?;
        }
        Ok(())
    }
}

/// Discount and reward-normalization settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReturnSpec {
    /// Discount factor in `[0, 1]`.
    pub gamma: f64,
    /// Apply the scale-compressing transform before discounting.
    pub normalize: bool,
    /// Linear term coefficient of the transform.
    pub epsilon: f64,
    /// Clip range applied after the transform.
    pub clip: (f64, f64),
}

impl Default for ReturnSpec {
    fn default() -> Self {
        ReturnSpec {
            gamma: 0.975,
            normalize: false,
            epsilon: 1e-2,
            clip: (-32.0, 32.0),
        }
    }
}

impl ReturnSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidInput(format!(
                "gamma must be in [0, 1], got {}",
                self.gamma
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if self.clip.0 >= self.clip.1 {
            return Err(Error::InvalidInput("empty clip range".into()));
        }
        Ok(())
    }

    /// `sign(r)(sqrt(|r|+1) - 1) + eps*r`, clipped. Compresses large rewards
    /// while keeping the function odd and monotone.
    pub fn transform(&self, r: f64) -> f64 {
        let t = r.signum() * ((r.abs() + 1.0).sqrt() - 1.0) + self.epsilon * r;
        t.clamp(self.clip.0, self.clip.1)
    }

    /// Apply the transform only when `normalize` is set.
    pub fn shape(&self, r: f64) -> f64 {
        if self.normalize {
            self.transform(r)
        } else {
            r
        }
    }
}

/// Discounted return `sum_t gamma^t r_t`, with optional per-reward
/// normalization per `spec`.
pub fn discounted_return(rewards: &[f64], spec: &ReturnSpec) -> Result<f64> {
    spec.validate()?;
    let mut total = 0.0;
    let mut discount = 1.0;
    for (i, &r) in rewards.iter().enumerate() {
        if !r.is_finite() {
            return Err(Error::InvalidInput(format!(
                "reward at index {i} is not finite"
            )));
        }
        total += discount * spec.shape(r);
        discount *= spec.gamma;
    }
    Ok(total)
}

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.json")
}

/// Load a dataset from a manifest: a JSON array of trace file paths relative
/// to the manifest's directory. Traces are validated and ordered by id.
pub fn load_dataset(manifest_path: &Path) -> Result<TraceDataset> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile {
            path: manifest_path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let entries: Vec<String> =
        serde_json::from_str(&text).map_err(|e| Error::malformed(manifest_path, e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut traces = Vec::with_capacity(entries.len());
    for entry in &entries {
        let path = dir.join(entry);
        if !path.exists() {
            return Err(Error::MissingFile { path });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let trace: Trace =
            serde_json::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
        trace.validate()?;
        traces.push(trace);
    }

    let name = manifest_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut ds = TraceDataset::new(name, traces)?;
    ds.manifest_path = Some(manifest_path.to_path_buf());
    Ok(ds)
}

/// Write the dataset under `dir` in canonical form: one pretty-printed JSON
/// file per trace plus `manifest.json` listing the files in id order.
/// Returns the manifest path. Canonical serialization makes
/// save -> load -> save byte-identical.
pub fn save_dataset(dataset: &TraceDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.traces.len());
    for trace in &dataset.traces {
        let file = file_name_for(&trace.id);
        if entries.contains(&file) {
            return Err(Error::InvalidInput(format!(
                "trace ids `{}` collide after filename sanitization",
                trace.id
            )));
        }
        let path = dir.join(&file);
        let mut bytes =
            serde_json::to_vec_pretty(trace).map_err(|e| Error::malformed(&path, e.to_string()))?;
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(file);
    }
    let manifest_path = dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&entries)
        .map_err(|e| Error::malformed(&manifest_path, e.to_string()))?;
    bytes.push(b'\n');
    fs::write(&manifest_path, bytes).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

/// Deterministically split a dataset into train/test halves by shuffling ids
/// with `seed` and cutting at `train_fraction`.
pub fn split_train_test(
    dataset: &TraceDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(TraceDataset, TraceDataset)> {
    assert!((0.0..=1.0).contains(&train_fraction));
    let mut ids: Vec<usize> = (0..dataset.traces.len()).collect();
    let mut rng = rng_from_seed(derive_seed(seed, "train-test-split"));
    ids.shuffle(&mut rng);
    let cut = ((dataset.traces.len() as f64) * train_fraction).round() as usize;
    let train: Vec<Trace> = ids[..cut]
        .iter()
        .map(|&i| dataset.traces[i].clone())
        .collect();
    let test: Vec<Trace> = ids[cut..]
        .iter()
        .map(|&i| dataset.traces[i].clone())
        .collect();
    Ok((
        TraceDataset::new(format!("{}-train", dataset.name), train)?,
        TraceDataset::new(format!("{}-test", dataset.name), test)?,
    ))
}
