//! Trace prioritization: categorical distributions over clusters, static
//! inverse-density weights, dynamically adapted weights driven by an online
//! return predictor, baseline samplers, and the selector service actors
//! sample from.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, RwLock};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::nn::{Adam, Mlp};
use crate::rng::rng_from_seed;
use crate::trace::{TraceDataset, TraceKind};

/// Cluster labels as sampling categories: the original pdf `f` and the
/// member traces per category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    /// Cluster ids, ascending; only nonempty clusters appear.
    pub categories: Vec<usize>,
    /// `f(y_i)`: fraction of traces per category, sums to 1.
    pub pdf: Vec<f64>,
    /// Trace ids per category; a partition of the dataset.
    pub members: Vec<Vec<String>>,
}

impl CategoricalDistribution {
    pub fn from_labels(trace_ids: &[String], labels: &[usize]) -> Result<Self> {
        assert_eq!(trace_ids.len(), labels.len());
        if trace_ids.is_empty() {
            return Err(Error::InvalidInput("no traces to categorize".into()));
        }
        let mut categories: Vec<usize> = labels.to_vec();
        categories.sort_unstable();
        categories.dedup();
        let mut members: Vec<Vec<String>> = vec![Vec::new(); categories.len()];
        for (id, &label) in trace_ids.iter().zip(labels) {
            let idx = categories.binary_search(&label).unwrap();
            members[idx].push(id.clone());
        }
        let total = trace_ids.len() as f64;
        let pdf = members.iter().map(|m| m.len() as f64 / total).collect();
        Ok(CategoricalDistribution {
            categories,
            pdf,
            members,
        })
    }

    pub fn from_cluster_model(model: &ClusterModel) -> Result<Self> {
        Self::from_labels(&model.trace_ids, &model.labels)
    }

    /// Build directly from a pdf, for synthetic distributions in tests and
    /// property suites. Members get placeholder ids.
    pub fn from_pdf(pdf: &[f64]) -> Result<Self> {
        let sum: f64 = pdf.iter().sum();
        if pdf.is_empty() || (sum - 1.0).abs() > 1e-9 || pdf.iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidInput(
                "pdf must be nonnegative and sum to 1".into(),
            ));
        }
        Ok(CategoricalDistribution {
            categories: (0..pdf.len()).collect(),
            pdf: pdf.to_vec(),
            members: (0..pdf.len()).map(|i| vec![format!("cat{i}")]).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// trace id -> category index map.
    pub fn category_index_of(&self) -> HashMap<String, usize> {
        let mut map = HashMap::new();
        for (idx, members) in self.members.iter().enumerate() {
            for id in members {
                map.insert(id.clone(), idx);
            }
        }
        map
    }
}

/// Published sampling weights and the effective pdf they induce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightTable {
    /// Monotonically increasing across publishes.
    pub version: u64,
    /// Category ids aligned with the distribution.
    pub categories: Vec<usize>,
    /// `W(y_i) >= 0`, at least one positive.
    pub weights: Vec<f64>,
    /// `f'(y_i) = W f / sum(W f)`.
    pub effective_pdf: Vec<f64>,
}

impl WeightTable {
    pub fn new(weights: Vec<f64>, dist: &CategoricalDistribution, version: u64) -> Result<Self> {
        if weights.len() != dist.len() {
            return Err(Error::InvalidInput(
                "weight table and distribution categories differ".into(),
            ));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidInput(
                "weights must be finite and >= 0".into(),
            ));
        }
        let norm: f64 = weights.iter().zip(&dist.pdf).map(|(w, f)| w * f).sum();
        if norm <= 0.0 {
            return Err(Error::InvalidInput(
                "at least one category needs positive weight and density".into(),
            ));
        }
        let effective_pdf = weights
            .iter()
            .zip(&dist.pdf)
            .map(|(w, f)| w * f / norm)
            .collect();
        Ok(WeightTable {
            version,
            categories: dist.categories.clone(),
            weights,
            effective_pdf,
        })
    }

    /// `W == 1` everywhere: sampling follows the raw density (random
    /// sampling baseline).
    pub fn uniform(dist: &CategoricalDistribution, version: u64) -> Self {
        WeightTable::new(vec![1.0; dist.len()], dist, version).expect("uniform is valid")
    }
}

/// Inverse-density weights: `W = 1/f`, which makes the effective pdf
/// uniform over categories. Zero-density categories are excluded with a
/// warning (their weight is undefined).
pub fn static_weights(dist: &CategoricalDistribution, version: u64) -> Result<WeightTable> {
    let weights: Vec<f64> = dist
        .pdf
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            if f > 0.0 {
                1.0 / f
            } else {
                log::warn!(
                    "category {} is empty; excluded from static weights",
                    dist.categories[i]
                );
                0.0
            }
        })
        .collect();
    WeightTable::new(weights, dist, version)
}

/// Baseline: split throughput traces at `threshold` by mean value and give
/// each side total probability 1/2. Falls back to one uniform class (plain
/// random sampling) with a warning when a side is empty.
pub fn two_class_equal_weights(
    dataset: &TraceDataset,
    threshold: f64,
) -> Result<(CategoricalDistribution, WeightTable)> {
    if dataset.kind() != Some(TraceKind::ThroughputSeries) {
        return Err(Error::InvalidInput(
            "two-class weighting applies to throughput datasets".into(),
        ));
    }
    let ids: Vec<String> = dataset.traces.iter().map(|t| t.id.clone()).collect();
    let labels: Vec<usize> = dataset
        .traces
        .iter()
        .map(|t| usize::from(t.mean_value() > threshold))
        .collect();
    let one_class = labels.iter().all(|&l| l == 0) || labels.iter().all(|&l| l == 1);
    if one_class {
        log::warn!(
            "two-class split at {threshold} left one side empty; falling back to random sampling"
        );
        let dist = CategoricalDistribution::from_labels(&ids, &vec![0; ids.len()])?;
        let table = WeightTable::uniform(&dist, 0);
        return Ok((dist, table));
    }
    let dist = CategoricalDistribution::from_labels(&ids, &labels)?;
    let table = static_weights(&dist, 0)?;
    Ok((dist, table))
}

/// Draw a category by effective pdf, then a member uniformly inside it.
pub fn sample_trace<'d>(
    table: &WeightTable,
    dist: &'d CategoricalDistribution,
    rng: &mut impl Rng,
) -> &'d str {
    debug_assert_eq!(table.categories, dist.categories);
    let mut u: f64 = rng.random_range(0.0..1.0);
    let mut cat = dist.len() - 1;
    for (i, &p) in table.effective_pdf.iter().enumerate() {
        if u < p {
            cat = i;
            break;
        }
        u -= p;
    }
    // Guard against landing on a zero-probability category through float
    // rounding at the tail.
    if table.effective_pdf[cat] <= 0.0 {
        cat = table
            .effective_pdf
            .iter()
            .enumerate()
            .rev()
            .find(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
            .expect("some category has positive probability");
    }
    let members = &dist.members[cat];
    &members[rng.random_range(0..members.len())]
}

/// One finished episode feeding dynamic prioritization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub trace_id: String,
    /// Index into the distribution's categories (cluster assignment of the
    /// trace).
    pub category: usize,
    /// Discounted return, normalized per the training return spec.
    pub return_g: f64,
    /// Standardized feature vector of the trace.
    pub features: Vec<f64>,
    /// Global env-step count when the episode finished.
    pub step: u64,
}

/// Settings for the online return predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub hidden: Vec<usize>,
    pub lr: f32,
    /// Per-category FIFO capacity H.
    pub buffer_capacity: usize,
    pub batch_size: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            hidden: vec![64, 64],
            lr: 1e-3,
            buffer_capacity: 256,
            batch_size: 32,
        }
    }
}

/// Small regressor mapping standardized features to the observed return,
/// trained online from bounded per-category FIFOs.
pub struct ReturnPredictor {
    net: Mlp,
    opt: Adam,
    buffers: Vec<VecDeque<(Vec<f32>, f32)>>,
    capacity: usize,
    batch_size: usize,
    input_dim: usize,
    train_steps: u64,
    rng: ChaCha8Rng,
}

impl ReturnPredictor {
    pub fn new(input_dim: usize, n_categories: usize, cfg: &PredictorConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(1);
        let net = Mlp::new(&sizes, false, &mut rng);
        let opt = Adam::new(&net.layers, cfg.lr);
        ReturnPredictor {
            net,
            opt,
            buffers: vec![VecDeque::new(); n_categories],
            capacity: cfg.buffer_capacity,
            batch_size: cfg.batch_size,
            input_dim,
            train_steps: 0,
            rng,
        }
    }

    pub fn record(&mut self, category: usize, features: &[f64], return_g: f64) {
        debug_assert_eq!(features.len(), self.input_dim);
        let buf = &mut self.buffers[category];
        if buf.len() == self.capacity {
            buf.pop_front();
        }
        buf.push_back((
            features.iter().map(|&v| v as f32).collect(),
            return_g as f32,
        ));
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let x = Array2::from_shape_fn((1, self.input_dim), |(_, j)| features[j] as f32);
        f64::from(self.net.forward(&x)[(0, 0)])
    }

    pub fn len(&self) -> usize {
        self.buffers.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// One squared-error step on a uniform batch over the union of the
    /// category buffers. `None` when fewer than `batch_size` pairs exist.
    pub fn train_step(&mut self) -> Option<f32> {
        let total = self.len();
        if total < self.batch_size {
            return None;
        }
        let flat: Vec<(usize, usize)> = self
            .buffers
            .iter()
            .enumerate()
            .flat_map(|(c, b)| (0..b.len()).map(move |i| (c, i)))
            .collect();
        let mut x = Array2::zeros((self.batch_size, self.input_dim));
        let mut y = vec![0.0f32; self.batch_size];
        for row in 0..self.batch_size {
            let (c, i) = flat[self.rng.random_range(0..flat.len())];
            let (features, g) = &self.buffers[c][i];
            for (j, &v) in features.iter().enumerate() {
                x[(row, j)] = v;
            }
            y[row] = *g;
        }
        let loss = crate::nn::mse_step(&mut self.net, &mut self.opt, &x, &y);
        self.train_steps += 1;
        Some(loss)
    }

    pub fn save_json(&self, path: &std::path::Path) -> Result<()> {
        let ckpt = PredictorCheckpoint {
            schema_version: 1,
            input_dim: self.input_dim,
            train_steps: self.train_steps,
            net: self.net.clone(),
        };
        let mut bytes =
            serde_json::to_vec_pretty(&ckpt).map_err(|e| Error::malformed(path, e.to_string()))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Restore the regressor from a checkpoint; buffers start empty.
    pub fn load_json(
        path: &std::path::Path,
        n_categories: usize,
        cfg: &PredictorConfig,
        seed: u64,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: PredictorCheckpoint =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        if ckpt.schema_version != 1 {
            return Err(Error::malformed(
                path,
                format!("unsupported predictor schema {}", ckpt.schema_version),
            ));
        }
        let mut predictor = ReturnPredictor::new(ckpt.input_dim, n_categories, cfg, seed);
        predictor.net = ckpt.net;
        predictor.opt = Adam::new(&predictor.net.layers, cfg.lr);
        predictor.train_steps = ckpt.train_steps;
        Ok(predictor)
    }
}

#[derive(Serialize, Deserialize)]
struct PredictorCheckpoint {
    schema_version: u32,
    input_dim: usize,
    train_steps: u64,
    net: Mlp,
}

/// Pure dynamic-weight computation from per-category windows of
/// `(predicted, observed)` return pairs.
///
/// Per category: term1 = mean |predicted - observed| (prediction error),
/// term2 = -mean(observed) (low-return compensation). Each term is min-max
/// normalized across categories to [0, 1]; weights are the floored sum,
/// rescaled to mean 1. Categories with empty windows take the global mean
/// of both terms.
pub fn dynamic_weights_from_windows(
    windows: &[Vec<(f64, f64)>],
    predictor_trained: bool,
    weight_floor: f64,
) -> Vec<f64> {
    let n = windows.len();
    assert!(n > 0);
    let mut term1 = vec![f64::NAN; n];
    let mut term2 = vec![f64::NAN; n];
    let mut all_abs_g = Vec::new();
    for (i, window) in windows.iter().enumerate() {
        if window.is_empty() {
            continue;
        }
        let m = window.len() as f64;
        term1[i] = window.iter().map(|&(p, g)| (p - g).abs()).sum::<f64>() / m;
        term2[i] = -window.iter().map(|&(_, g)| g).sum::<f64>() / m;
        all_abs_g.extend(window.iter().map(|&(_, g)| g.abs()));
    }
    if all_abs_g.is_empty() {
        return vec![1.0; n];
    }
    if !predictor_trained {
        // No meaningful error signal yet: use the output scale as a flat
        // placeholder so term2 drives the update.
        log::warn!("return predictor untrained; using global output scale for the error term");
        let scale = all_abs_g.iter().sum::<f64>() / all_abs_g.len() as f64;
        for (t, w) in term1.iter_mut().zip(windows) {
            if !w.is_empty() {
                *t = scale;
            }
        }
    }
    // Cold categories take the global mean of each term.
    let fill_global = |terms: &mut [f64]| {
        let known: Vec<f64> = terms.iter().copied().filter(|t| !t.is_nan()).collect();
        let global = known.iter().sum::<f64>() / known.len() as f64;
        for t in terms.iter_mut() {
            if t.is_nan() {
                *t = global;
            }
        }
    };
    fill_global(&mut term1);
    fill_global(&mut term2);

    let minmax = |terms: &[f64]| -> Vec<f64> {
        let lo = terms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
            return vec![0.0; terms.len()];
        }
        terms.iter().map(|&t| (t - lo) / (hi - lo)).collect()
    };
    let t1 = minmax(&term1);
    let t2 = minmax(&term2);
    let raw: Vec<f64> = t1
        .iter()
        .zip(&t2)
        .map(|(&a, &b)| a + b + weight_floor)
        .collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    raw.into_iter().map(|w| w / mean).collect()
}

/// Recompute dynamic weights from the recent per-category episode windows
/// and the predictor's current accuracy; the new table's version is
/// `prev_version + 1`.
pub fn update_dynamic_weights(
    predictor: &ReturnPredictor,
    dist: &CategoricalDistribution,
    recent: &[VecDeque<EpisodeResult>],
    weight_floor: f64,
    prev_version: u64,
) -> Result<WeightTable> {
    assert_eq!(recent.len(), dist.len());
    let windows: Vec<Vec<(f64, f64)>> = recent
        .iter()
        .map(|w| {
            w.iter()
                .map(|r| (predictor.predict(&r.features), r.return_g))
                .collect()
        })
        .collect();
    let weights = dynamic_weights_from_windows(&windows, predictor.train_steps() > 0, weight_floor);
    WeightTable::new(weights, dist, prev_version + 1)
}

/// Dynamic prioritization driver: owns the predictor, the bounded
/// per-category windows, and the update cadence.
pub struct DynamicPrioritizer {
    pub predictor: ReturnPredictor,
    windows: Vec<VecDeque<EpisodeResult>>,
    window_capacity: usize,
    update_every: usize,
    cold_start_episodes: usize,
    weight_floor: f64,
    train_steps_per_episode: usize,
    episodes_seen: usize,
    episodes_at_last_update: usize,
}

/// Cadence and floor settings for dynamic prioritization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DynamicConfig {
    /// Recompute weights every U completed episodes.
    pub update_every_episodes: usize,
    /// Train with W == 1 for the first `cold_start_multiplier * U` episodes.
    pub cold_start_multiplier: usize,
    /// Relative floor added so no category starves.
    pub weight_floor: f64,
    /// Window capacity H per category.
    pub window_capacity: usize,
    /// Predictor regression steps taken per recorded episode.
    pub train_steps_per_episode: usize,
    pub predictor: PredictorConfig,
}

impl Default for DynamicConfig {
    fn default() -> Self {
        DynamicConfig {
            update_every_episodes: 64,
            cold_start_multiplier: 10,
            weight_floor: 0.05,
            window_capacity: 256,
            train_steps_per_episode: 4,
            predictor: PredictorConfig::default(),
        }
    }
}

impl DynamicPrioritizer {
    pub fn new(input_dim: usize, n_categories: usize, cfg: &DynamicConfig, seed: u64) -> Self {
        DynamicPrioritizer {
            predictor: ReturnPredictor::new(input_dim, n_categories, &cfg.predictor, seed),
            windows: vec![VecDeque::new(); n_categories],
            window_capacity: cfg.window_capacity,
            update_every: cfg.update_every_episodes.max(1),
            cold_start_episodes: cfg.cold_start_multiplier * cfg.update_every_episodes,
            weight_floor: cfg.weight_floor,
            train_steps_per_episode: cfg.train_steps_per_episode,
            episodes_seen: 0,
            episodes_at_last_update: 0,
        }
    }

    /// Ingest a finished episode; trains the predictor a few steps.
    pub fn record(&mut self, result: EpisodeResult) {
        let cat = result.category;
        self.predictor
            .record(cat, &result.features, result.return_g);
        let window = &mut self.windows[cat];
        if window.len() == self.window_capacity {
            window.pop_front();
        }
        window.push_back(result);
        self.episodes_seen += 1;
        for _ in 0..self.train_steps_per_episode {
            if self.predictor.train_step().is_none() {
                break;
            }
        }
    }

    /// New weight table once another `update_every` episodes have finished
    /// since the last update (after the cold start), else `None`.
    pub fn maybe_update(
        &mut self,
        dist: &CategoricalDistribution,
        prev_version: u64,
    ) -> Result<Option<WeightTable>> {
        if self.episodes_seen < self.cold_start_episodes
            || self.episodes_seen < self.episodes_at_last_update + self.update_every
        {
            return Ok(None);
        }
        self.episodes_at_last_update = self.episodes_seen;
        update_dynamic_weights(
            &self.predictor,
            dist,
            &self.windows,
            self.weight_floor,
            prev_version,
        )
        .map(Some)
    }

    pub fn episodes_seen(&self) -> usize {
        self.episodes_seen
    }
}

/// The service actors query for traces. One updater publishes weight
/// tables; samplers take atomic snapshots and never observe a torn mix of
/// two versions.
pub struct TraceSelector {
    dist: CategoricalDistribution,
    category_of: HashMap<String, usize>,
    table: RwLock<Arc<WeightTable>>,
}

impl TraceSelector {
    pub fn new(dist: CategoricalDistribution) -> Self {
        let table = Arc::new(WeightTable::uniform(&dist, 0));
        let category_of = dist.category_index_of();
        TraceSelector {
            dist,
            category_of,
            table: RwLock::new(table),
        }
    }

    pub fn distribution(&self) -> &CategoricalDistribution {
        &self.dist
    }

    pub fn category_of(&self, trace_id: &str) -> Option<usize> {
        self.category_of.get(trace_id).copied()
    }

    /// Immutable snapshot of the current table (version + weights together).
    pub fn snapshot(&self) -> Arc<WeightTable> {
        self.table.read().expect("weight table lock").clone()
    }

    /// Publish new weights; the version increments by one. Returns the new
    /// version.
    pub fn publish(&self, weights: Vec<f64>) -> Result<u64> {
        let mut guard = self.table.write().expect("weight table lock");
        let version = guard.version + 1;
        let table = WeightTable::new(weights, &self.dist, version)?;
        *guard = Arc::new(table);
        Ok(version)
    }

    /// Publish an already-built table; its version must exceed the current
    /// one.
    pub fn publish_table(&self, table: WeightTable) -> Result<u64> {
        let mut guard = self.table.write().expect("weight table lock");
        if table.version <= guard.version {
            return Err(Error::InvalidInput(format!(
                "stale weight table version {} (current {})",
                table.version, guard.version
            )));
        }
        let version = table.version;
        *guard = Arc::new(table);
        Ok(version)
    }

    pub fn sample<'s>(&'s self, rng: &mut impl Rng) -> (&'s str, u64) {
        let table = self.snapshot();
        let id = sample_trace(&table, &self.dist, rng);
        (id, table.version)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn static_weights_two_category_construction() {
        // f = [1/(1+L), L/(1+L)] with L = 4
        let dist = CategoricalDistribution::from_pdf(&[0.2, 0.8]).unwrap();
        let table = static_weights(&dist, 0).unwrap();
        assert_abs_diff_eq!(table.weights[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(table.weights[1], 1.25, epsilon = 1e-12);
        assert_abs_diff_eq!(table.effective_pdf[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(table.effective_pdf[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn static_weights_uniform_pdf_is_fixed_point() {
        let dist = CategoricalDistribution::from_pdf(&[0.25; 4]).unwrap();
        let table = static_weights(&dist, 0).unwrap();
        for (w, (f, fp)) in table
            .weights
            .iter()
            .zip(dist.pdf.iter().zip(&table.effective_pdf))
        {
            assert_abs_diff_eq!(*w, 4.0, epsilon = 1e-12);
            assert_abs_diff_eq!(*fp, *f, epsilon = 1e-12);
        }
    }

    #[test]
    fn static_weights_flatten_random_pdfs() {
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let raw: Vec<f64> = (0..7).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            let pdf: Vec<f64> = raw.iter().map(|v| v / sum).collect();
            let dist = CategoricalDistribution::from_pdf(&pdf).unwrap();
            let table = static_weights(&dist, 0).unwrap();
            for &fp in &table.effective_pdf {
                assert!((fp - 1.0 / 7.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unbounded_density_ratio_construction() {
        for l in [10.0f64, 100.0, 1000.0] {
            let f = [1.0 / (1.0 + l), l / (1.0 + l)];
            let dist = CategoricalDistribution::from_pdf(&f).unwrap();
            let random = WeightTable::uniform(&dist, 0);
            let ratio = random.effective_pdf[1] / random.effective_pdf[0];
            assert_abs_diff_eq!(ratio, l, epsilon = 1e-9 * l);
            let balanced = static_weights(&dist, 1).unwrap();
            let ratio = balanced.effective_pdf[1] / balanced.effective_pdf[0];
            assert_abs_diff_eq!(ratio, 1.0, epsilon = 1e-12);
        }
    }

    fn throughput_dataset(fast: usize, slow: usize) -> TraceDataset {
        let mut traces = Vec::new();
        for i in 0..fast {
            traces.push(crate::trace::Trace {
                id: format!("fast{i:03}"),
                kind: TraceKind::ThroughputSeries,
                samples: (0..10).map(|t| (t as f64, 6.0)).collect(),
                params: None,
                ground_truth_class: None,
            });
        }
        for i in 0..slow {
            traces.push(crate::trace::Trace {
                id: format!("slow{i:03}"),
                kind: TraceKind::ThroughputSeries,
                samples: (0..10).map(|t| (t as f64, 0.5)).collect(),
                params: None,
                ground_truth_class: None,
            });
        }
        TraceDataset::new("tc", traces).unwrap()
    }

    #[test]
    fn two_class_per_trace_probabilities() {
        let ds = throughput_dataset(90, 10);
        let (dist, table) = two_class_equal_weights(&ds, 2.0).unwrap();
        // category 0 = slow (mean <= threshold), 1 = fast
        let slow_idx = dist
            .members
            .iter()
            .position(|m| m[0].starts_with("slow"))
            .unwrap();
        let fast_idx = 1 - slow_idx;
        let p_slow = table.effective_pdf[slow_idx] / dist.members[slow_idx].len() as f64;
        let p_fast = table.effective_pdf[fast_idx] / dist.members[fast_idx].len() as f64;
        assert_abs_diff_eq!(p_slow, 1.0 / 20.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p_fast, 1.0 / 180.0, epsilon = 1e-12);
    }

    #[test]
    fn two_class_single_side_falls_back() {
        let ds = throughput_dataset(12, 0);
        let (dist, table) = two_class_equal_weights(&ds, 2.0).unwrap();
        assert_eq!(dist.len(), 1);
        assert_eq!(table.weights, vec![1.0]);
    }

    #[test]
    fn sampling_respects_effective_pdf() {
        let dist = CategoricalDistribution::from_labels(
            &["a".into(), "b".into(), "c".into(), "d".into()],
            &[0, 0, 0, 1],
        )
        .unwrap();
        // Skewed f = [0.75, 0.25]; static weights flatten to 50/50.
        let table = static_weights(&dist, 0).unwrap();
        let mut rng = rng_from_seed(17);
        let mut counts = [0usize; 2];
        let draws = 20_000;
        for _ in 0..draws {
            let id = sample_trace(&table, &dist, &mut rng);
            counts[usize::from(id == "d")] += 1;
        }
        let freq = counts[0] as f64 / draws as f64;
        // 4-sigma multinomial bound around 0.5
        let sigma = (0.5 * 0.5 / draws as f64).sqrt();
        assert!((freq - 0.5).abs() < 4.0 * sigma, "freq {freq}");
    }

    #[test]
    fn zero_weight_category_never_sampled() {
        let dist =
            CategoricalDistribution::from_labels(&["a".into(), "b".into()], &[0, 1]).unwrap();
        let table = WeightTable::new(vec![1.0, 0.0], &dist, 0).unwrap();
        let mut rng = rng_from_seed(23);
        for _ in 0..2000 {
            assert_eq!(sample_trace(&table, &dist, &mut rng), "a");
        }
    }

    #[test]
    fn single_category_always_sampled() {
        let dist = CategoricalDistribution::from_labels(&["only".into()], &[3]).unwrap();
        let table = WeightTable::uniform(&dist, 0);
        let mut rng = rng_from_seed(29);
        assert_eq!(sample_trace(&table, &dist, &mut rng), "only");
    }

    #[test]
    fn dynamic_identical_windows_give_uniform_weights() {
        let windows = vec![vec![(1.0, 2.0), (0.5, 1.5)]; 4];
        let w = dynamic_weights_from_windows(&windows, true, 0.05);
        for &wi in &w {
            assert_abs_diff_eq!(wi, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn dynamic_error_term_monotonicity() {
        // Equal returns, one category with much larger prediction error.
        let windows = vec![
            vec![(0.0, 1.0), (0.1, 1.0)],
            vec![(5.0, 1.0), (4.0, 1.0)],
            vec![(0.2, 1.0)],
        ];
        let w = dynamic_weights_from_windows(&windows, true, 0.05);
        assert!(w[1] > w[0] && w[1] > w[2], "{w:?}");
    }

    #[test]
    fn dynamic_low_return_term_monotonicity() {
        // Equal errors, one category with much lower returns.
        let windows = vec![
            vec![(1.0, 2.0), (3.0, 4.0)],
            vec![(-9.0, -8.0), (-11.0, -10.0)],
            vec![(2.5, 3.5)],
        ];
        let w = dynamic_weights_from_windows(&windows, true, 0.05);
        assert!(w[1] > w[0] && w[1] > w[2], "{w:?}");
    }

    #[test]
    fn dynamic_weights_scale_invariant() {
        let windows = vec![
            vec![(0.0, 1.0), (0.5, 2.0)],
            vec![(4.0, -3.0), (3.0, -2.0)],
            vec![(1.0, 6.0), (2.0, 5.0)],
        ];
        let base = dynamic_weights_from_windows(&windows, true, 0.05);
        let scaled: Vec<Vec<(f64, f64)>> = windows
            .iter()
            .map(|w| {
                w.iter()
                    .map(|&(p, g)| (7.0 * p + 3.0, 7.0 * g + 3.0))
                    .collect()
            })
            .collect();
        let rescaled = dynamic_weights_from_windows(&scaled, true, 0.05);
        for (a, b) in base.iter().zip(&rescaled) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn predictor_learns_linear_target() {
        let mut rng = rng_from_seed(31);
        let dim = 6;
        let coef: Vec<f64> = (0..dim).map(|i| (i as f64) - 2.5).collect();
        let cfg = PredictorConfig::default();
        let mut pred = ReturnPredictor::new(dim, 3, &cfg, 37);
        let mut heldout = Vec::new();
        for i in 0..2000 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g: f64 = coef.iter().zip(&x).map(|(c, v)| c * v).sum::<f64>() + 0.5;
            if i % 10 == 0 {
                heldout.push((x.clone(), g));
            } else {
                pred.record(i % 3, &x, g);
            }
        }
        for _ in 0..2000 {
            pred.train_step().unwrap();
        }
        let mae: f64 = heldout
            .iter()
            .map(|(x, g)| (pred.predict(x) - g).abs())
            .sum::<f64>()
            / heldout.len() as f64;
        let mean_g: f64 = heldout.iter().map(|(_, g)| g).sum::<f64>() / heldout.len() as f64;
        let std_g: f64 = (heldout
            .iter()
            .map(|(_, g)| (g - mean_g).powi(2))
            .sum::<f64>()
            / heldout.len() as f64)
            .sqrt();
        assert!(mae < 0.05 * std_g, "MAE {mae} vs 5% of std {std_g}");
    }

    #[test]
    fn predictor_checkpoint_roundtrip() {
        let cfg = PredictorConfig::default();
        let mut pred = ReturnPredictor::new(3, 2, &cfg, 51);
        let mut rng = rng_from_seed(53);
        for i in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            pred.record(i % 2, &x, x[0] * 2.0);
        }
        for _ in 0..50 {
            pred.train_step().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictor.json");
        pred.save_json(&path).unwrap();
        let loaded = ReturnPredictor::load_json(&path, 2, &cfg, 51).unwrap();
        assert_eq!(loaded.train_steps(), pred.train_steps());
        let probe = vec![0.3, -0.2, 0.9];
        assert_eq!(loaded.predict(&probe), pred.predict(&probe));
    }

    #[test]
    fn predictor_insufficient_data_is_noop() {
        let cfg = PredictorConfig::default();
        let mut pred = ReturnPredictor::new(4, 2, &cfg, 41);
        assert!(pred.train_step().is_none());
        pred.record(0, &[0.0, 0.0, 0.0, 0.0], 1.0);
        assert!(pred.train_step().is_none());
        assert_eq!(pred.train_steps(), 0);
    }

    #[test]
    fn window_capacity_bounded() {
        let cfg = DynamicConfig {
            window_capacity: 8,
            train_steps_per_episode: 0,
            ..Default::default()
        };
        let mut dp = DynamicPrioritizer::new(2, 2, &cfg, 43);
        for i in 0..40 {
            dp.record(EpisodeResult {
                trace_id: format!("t{i}"),
                category: i % 2,
                return_g: i as f64,
                features: vec![0.0, 1.0],
                step: i as u64,
            });
        }
        assert!(dp.windows.iter().all(|w| w.len() <= 8));
        assert_eq!(dp.episodes_seen(), 40);
    }

    #[test]
    fn cold_start_defers_updates() {
        let cfg = DynamicConfig {
            update_every_episodes: 4,
            cold_start_multiplier: 2,
            train_steps_per_episode: 0,
            ..Default::default()
        };
        let dist = CategoricalDistribution::from_pdf(&[0.5, 0.5]).unwrap();
        let mut dp = DynamicPrioritizer::new(1, 2, &cfg, 47);
        let mut updates = 0;
        for i in 0..16 {
            dp.record(EpisodeResult {
                trace_id: "x".into(),
                category: i % 2,
                return_g: -1.0,
                features: vec![0.5],
                step: i as u64,
            });
            if dp.maybe_update(&dist, 0).unwrap().is_some() {
                updates += 1;
                assert!(dp.episodes_seen() >= 8, "update during cold start");
            }
        }
        assert!(updates > 0);
    }

    #[test]
    fn selector_snapshots_are_never_torn() {
        use std::sync::atomic::{AtomicBool, Ordering};
        let dist = CategoricalDistribution::from_pdf(&[0.5, 0.5]).unwrap();
        let selector = Arc::new(TraceSelector::new(dist));
        let stop = Arc::new(AtomicBool::new(false));

        let readers: Vec<_> = (0..4)
            .map(|r| {
                let selector = Arc::clone(&selector);
                let stop = Arc::clone(&stop);
                std::thread::spawn(move || {
                    let mut rng = rng_from_seed(100 + r);
                    let mut last_version = 0u64;
                    while !stop.load(Ordering::Relaxed) {
                        let snap = selector.snapshot();
                        // Weights are derived from the version by the writer;
                        // a torn read would break this equality.
                        assert_eq!(snap.weights[0], 1.0 + snap.version as f64);
                        assert!(snap.version >= last_version, "version went backwards");
                        last_version = snap.version;
                        let _ = sample_trace(&snap, selector.distribution(), &mut rng);
                    }
                })
            })
            .collect();

        for v in 1..200u64 {
            selector
                .publish(vec![1.0 + v as f64, 2.0 + v as f64])
                .unwrap();
        }
        stop.store(true, Ordering::Relaxed);
        for r in readers {
            r.join().unwrap();
        }
        assert_eq!(selector.snapshot().version, 199);
    }
}
