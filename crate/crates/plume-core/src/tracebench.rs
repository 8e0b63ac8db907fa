//! Parametric ABR benchmark: 2-state Markov throughput traces in four
//! classes, three dataset compositions, a fluid-model streaming environment,
//! and a companion load-balancing environment.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Pareto};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_indexed, rng_from_seed};
use crate::trace::{Trace, TraceDataset, TraceKind};

/// The four generated trace classes: two throughput levels x two variance
/// levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceClass {
    FastLowVar,
    FastHighVar,
    SlowLowVar,
    SlowHighVar,
}

impl TraceClass {
    pub const ALL: [TraceClass; 4] = [
        TraceClass::FastLowVar,
        TraceClass::FastHighVar,
        TraceClass::SlowLowVar,
        TraceClass::SlowHighVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TraceClass::FastLowVar => "fast_low_var",
            TraceClass::FastHighVar => "fast_high_var",
            TraceClass::SlowLowVar => "slow_low_var",
            TraceClass::SlowHighVar => "slow_high_var",
        }
    }

    pub fn is_fast(self) -> bool {
        matches!(self, TraceClass::FastLowVar | TraceClass::FastHighVar)
    }
}

impl fmt::Display for TraceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generator settings for one trace.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceGenConfig {
    pub class: TraceClass,
    /// (p_high_to_low, p_low_to_high) per step.
    pub markov: (f64, f64),
    /// (high, low) throughput levels in MB/s.
    pub levels: (f64, f64),
    /// Multiplicative gaussian noise sigma on the level.
    pub noise_sigma: f64,
    /// Trace length in seconds, at most 100.
    pub duration: f64,
    pub step: f64,
    pub seed: u64,
}

impl TraceGenConfig {
    /// Class defaults. Variance classes differ in the level gap and the
    /// multiplicative noise: a symmetric 2-state chain spends half its time
    /// at each level no matter how often it switches, so the gap (not the
    /// switching rate) is what sets the value variance. Within a speed
    /// class the mean throughput is identical (6.0 or 0.8 MB/s); the
    /// variation coefficient is ~0.1 for low-variance and ~0.35 for
    /// high-variance traces.
    pub fn for_class(class: TraceClass, seed: u64) -> TraceGenConfig {
        let (markov, noise_sigma) = match class {
            TraceClass::FastLowVar | TraceClass::SlowLowVar => ((0.05, 0.05), 0.02),
            TraceClass::FastHighVar | TraceClass::SlowHighVar => ((0.35, 0.35), 0.10),
        };
        let levels = match class {
            TraceClass::FastHighVar => (8.0, 4.0),
            TraceClass::FastLowVar => (6.6, 5.4),
            TraceClass::SlowHighVar => (1.2, 0.4),
            TraceClass::SlowLowVar => (0.88, 0.72),
        };
        TraceGenConfig {
            class,
            markov,
            levels,
            noise_sigma,
            duration: 100.0,
            step: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (p_hl, p_lh) = self.markov;
        if !(0.0..=1.0).contains(&p_hl) || !(0.0..=1.0).contains(&p_lh) {
            return Err(Error::InvalidInput(
                "switching probabilities must be in [0, 1]".into(),
            ));
        }
        if !(self.levels.0 > self.levels.1 && self.levels.1 > 0.0) {
            return Err(Error::InvalidInput(
                "levels must satisfy hi > lo > 0".into(),
            ));
        }
        if !(self.duration > 0.0 && self.duration <= 100.0) {
            return Err(Error::InvalidInput(
                "duration must be in (0, 100] seconds".into(),
            ));
        }
        if !self.step.is_finite() || self.step <= 0.0 {
            return Err(Error::InvalidInput("step must be positive".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidInput("noise sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Generate one throughput trace from the 2-state Markov chain, starting
/// from the chain's stationary distribution. Deterministic per seed.
pub fn generate_trace(cfg: &TraceGenConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let (p_hl, p_lh) = cfg.markov;
    let p_high_stationary = if p_hl + p_lh > 0.0 {
        p_lh / (p_hl + p_lh)
    } else {
        0.5
    };
    let mut high = rng.random_range(0.0..1.0) < p_high_stationary;
    let noise = Normal::new(0.0, 1.0).unwrap();
    let steps = (cfg.duration / cfg.step).round() as usize;
    let mut samples = Vec::with_capacity(steps);
    for i in 0..steps {
        let level = if high { cfg.levels.0 } else { cfg.levels.1 };
        let factor = (1.0 + cfg.noise_sigma * noise.sample(&mut rng)).max(0.0);
        samples.push((i as f64 * cfg.step, level * factor));
        let flip = rng.random_range(0.0..1.0);
        if high {
            if flip < p_hl {
                high = false;
            }
        } else if flip < p_lh {
            high = true;
        }
    }
    let trace = Trace {
        id: format!("tb_{}_{:016x}", cfg.class.name(), cfg.seed),
        kind: TraceKind::ThroughputSeries,
        samples,
        params: None,
        ground_truth_class: Some(cfg.class.name().to_string()),
    };
    trace.validate()?;
    Ok(trace)
}

/// Composition of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    MajorityFast,
    Balanced,
    MajoritySlow,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::MajorityFast => "majority_fast",
            DatasetKind::Balanced => "balanced",
            DatasetKind::MajoritySlow => "majority_slow",
        }
    }

    /// Class proportions in [`TraceClass::ALL`] order. Majority sides get
    /// 80% of the traces, split evenly across variance levels.
    pub fn proportions(self) -> [f64; 4] {
        match self {
            DatasetKind::MajorityFast => [0.4, 0.4, 0.1, 0.1],
            DatasetKind::Balanced => [0.25, 0.25, 0.25, 0.25],
            DatasetKind::MajoritySlow => [0.1, 0.1, 0.4, 0.4],
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<DatasetKind> {
        match s {
            "majority_fast" => Ok(DatasetKind::MajorityFast),
            "balanced" => Ok(DatasetKind::Balanced),
            "majority_slow" => Ok(DatasetKind::MajoritySlow),
            other => Err(Error::InvalidInput(format!(
                "unknown dataset kind `{other}`"
            ))),
        }
    }
}

/// The three train/test pairings used for benchmarking.
pub fn scenario_kinds(scenario: u32) -> Result<(DatasetKind, DatasetKind)> {
    match scenario {
        1 => Ok((DatasetKind::MajorityFast, DatasetKind::MajoritySlow)),
        2 => Ok((DatasetKind::Balanced, DatasetKind::Balanced)),
        3 => Ok((DatasetKind::MajoritySlow, DatasetKind::MajorityFast)),
        other => Err(Error::InvalidInput(format!(
            "unknown scenario {other}; expected 1, 2, or 3"
        ))),
    }
}

/// Generate `n` traces with the kind's class proportions. Two calls with
/// different seeds share no trace ids or sample streams, keeping train and
/// test datasets disjoint.
pub fn build_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<TraceDataset> {
    if n < 4 {
        return Err(Error::InvalidInput(
            "dataset needs at least 4 traces".into(),
        ));
    }
    let props = kind.proportions();
    let mut counts = [0usize; 4];
    let mut assigned = 0;
    for (i, p) in props.iter().enumerate() {
        counts[i] = (n as f64 * p).floor() as usize;
        assigned += counts[i];
    }
    // Distribute the rounding remainder by largest fractional part, ties in
    // class order.
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let fa = n as f64 * props[a] - (n as f64 * props[a]).floor();
        let fb = n as f64 * props[b] - (n as f64 * props[b]).floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n - assigned) {
        counts[i] += 1;
    }

    let mut traces = Vec::with_capacity(n);
    let mut idx = 0u64;
    for (class, &count) in TraceClass::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let trace_seed = derive_seed_indexed(seed, "tracebench-trace", idx);
            let cfg = TraceGenConfig::for_class(*class, trace_seed);
            traces.push(generate_trace(&cfg)?);
            idx += 1;
        }
    }
    TraceDataset::new(format!("{}_{}", kind.name(), seed), traces)
}

// ---------------------------------------------------------------------------
// ABR environment
// ---------------------------------------------------------------------------

/// Nominal bitrate ladder, MB/s.
pub const ABR_BITRATES: [f64; 3] = [1.0, 3.0, 6.0];
/// Playback buffer cap, seconds.
pub const MAX_BUFFER_SECONDS: f64 = 15.0;
/// Video seconds per chunk.
pub const CHUNK_SECONDS: f64 = 1.0;
/// Episode length cap in chunks.
pub const MAX_CHUNKS: usize = 100;
/// Steps of history exposed in the observation.
pub const HISTORY_LEN: usize = 10;

/// Environment knobs; defaults match the benchmark settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AbrConfig {
    /// QoE stall penalty per second, comparable to the top quality value.
    pub stall_penalty: f64,
    /// Relative sigma of the per-chunk size draw.
    pub chunk_size_std_frac: f64,
}

impl Default for AbrConfig {
    fn default() -> Self {
        AbrConfig {
            stall_penalty: 6.0,
            chunk_size_std_frac: 0.05,
        }
    }
}

/// Bitrate choice for the next chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbrAction(pub usize);

impl AbrAction {
    pub fn bitrate(self) -> f64 {
        ABR_BITRATES[self.0]
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct HistoryEntry {
    bitrate: f64,
    transmit: f64,
    stall: f64,
}

/// Outcome of one chunk download.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AbrStepOutcome {
    pub chunk: usize,
    pub action: usize,
    pub chunk_mb: f64,
    pub transmit: f64,
    pub stall: f64,
    pub idle: f64,
    pub reward: f64,
    pub done: bool,
}

/// Fluid-model streaming session over one throughput trace.
///
/// Downloads integrate the piecewise-constant trace over wall time; the
/// buffer drains during downloads, stalls when empty, gains one chunk of
/// video per delivery, and waits (idle) at the 15 s cap.
pub struct AbrEnv {
    samples: Vec<(f64, f64)>,
    trace_end: f64,
    cfg: AbrConfig,
    episode_seed: u64,
    buffer: f64,
    chunk_index: usize,
    cursor: f64,
    history: VecDeque<HistoryEntry>,
    /// Playback begins once the first chunk is delivered; until then the
    /// download is startup latency, not a stall.
    started: bool,
    done: bool,
    total_transmit: f64,
    total_idle: f64,
    total_stall: f64,
    total_reward: f64,
}

impl AbrEnv {
    pub fn new(trace: &Trace, episode_seed: u64) -> Result<AbrEnv> {
        AbrEnv::with_config(trace, episode_seed, AbrConfig::default())
    }

    pub fn with_config(trace: &Trace, episode_seed: u64, cfg: AbrConfig) -> Result<AbrEnv> {
        if trace.kind != TraceKind::ThroughputSeries || trace.samples.len() < 2 {
            return Err(Error::invalid_trace(
                &trace.id,
                "ABR episodes need a throughput series with >= 2 samples",
            ));
        }
        let first = trace.samples[0].0;
        let last = trace.samples[trace.samples.len() - 1].0;
        let mean_step = (last - first) / (trace.samples.len() - 1) as f64;
        Ok(AbrEnv {
            samples: trace.samples.clone(),
            trace_end: last + mean_step,
            cfg,
            episode_seed,
            buffer: 0.0,
            chunk_index: 0,
            cursor: first,
            history: VecDeque::from(vec![HistoryEntry::default(); HISTORY_LEN]),
            started: false,
            done: false,
            total_transmit: 0.0,
            total_idle: 0.0,
            total_stall: 0.0,
            total_reward: 0.0,
        })
    }

    pub fn action_count(&self) -> usize {
        ABR_BITRATES.len()
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn chunk_index(&self) -> usize {
        self.chunk_index
    }

    pub fn totals(&self) -> (f64, f64, f64, f64) {
        (
            self.total_transmit,
            self.total_idle,
            self.total_stall,
            self.total_reward,
        )
    }

    /// Wall-clock seconds elapsed since the episode start.
    pub fn wall_time(&self) -> f64 {
        self.cursor - self.samples[0].0
    }

    /// Throughput at wall-clock time `t`: previous-value hold, extended past
    /// the last sample.
    fn throughput_at(&self, t: f64) -> (f64, f64) {
        // Returns (rate, segment end).
        match self.samples.iter().rposition(|&(ts, _)| ts <= t) {
            Some(i) if i + 1 < self.samples.len() => (self.samples[i].1, self.samples[i + 1].0),
            Some(i) => (self.samples[i].1, f64::INFINITY),
            None => (self.samples[0].1, self.samples[0].0),
        }
    }

    /// Seconds to move `size_mb` through the trace starting at `from`.
    fn transmit_time(&self, from: f64, size_mb: f64) -> f64 {
        let mut remaining = size_mb;
        let mut t = from;
        loop {
            let (rate, seg_end) = self.throughput_at(t);
            let rate = rate.max(1e-12);
            let seg_span = seg_end - t;
            let capacity = rate * seg_span;
            if capacity >= remaining || !seg_end.is_finite() {
                return t + remaining / rate - from;
            }
            remaining -= capacity;
            t = seg_end;
        }
    }

    /// Stacked observation: 10 steps of (bitrate, transmit, stall) history
    /// plus the current buffer level, all scaled to O(1).
    pub fn observation(&self) -> Vec<f32> {
        let mut obs = Vec::with_capacity(HISTORY_LEN * 3 + 1);
        for h in &self.history {
            obs.push((h.bitrate / ABR_BITRATES[2]) as f32);
            obs.push((h.transmit.min(8.0) / 4.0) as f32);
            obs.push((h.stall.min(8.0) / 4.0) as f32);
        }
        obs.push((self.buffer / MAX_BUFFER_SECONDS) as f32);
        obs
    }

    pub fn observation_len() -> usize {
        HISTORY_LEN * 3 + 1
    }

    /// Download one chunk at the chosen bitrate.
    pub fn step(&mut self, action: AbrAction) -> Result<AbrStepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        if action.0 >= ABR_BITRATES.len() {
            return Err(Error::InvalidAction(format!(
                "bitrate index {} out of range",
                action.0
            )));
        }
        let nominal = action.bitrate();
        // Chunk sizes are seeded per chunk so an episode replays identically
        // regardless of the policy's action order elsewhere.
        let mut chunk_rng = rng_from_seed(derive_seed_indexed(
            self.episode_seed,
            "chunk-size",
            self.chunk_index as u64,
        ));
        let noise = Normal::new(0.0, 1.0).unwrap();
        let factor = (1.0 + self.cfg.chunk_size_std_frac * noise.sample(&mut chunk_rng)).max(0.1);
        let chunk_mb = nominal * CHUNK_SECONDS * factor;

        let transmit = self.transmit_time(self.cursor, chunk_mb);
        let (stall, after_download) = if self.started {
            (
                (transmit - self.buffer).max(0.0),
                (self.buffer - transmit).max(0.0) + CHUNK_SECONDS,
            )
        } else {
            self.started = true;
            (0.0, CHUNK_SECONDS)
        };
        let idle = (after_download - MAX_BUFFER_SECONDS).max(0.0);
        self.buffer = after_download.min(MAX_BUFFER_SECONDS);
        self.cursor += transmit + idle;
        self.chunk_index += 1;

        let reward = nominal - self.cfg.stall_penalty * stall;

        self.history.pop_front();
        self.history.push_back(HistoryEntry {
            bitrate: nominal,
            transmit,
            stall,
        });
        self.total_transmit += transmit;
        self.total_idle += idle;
        self.total_stall += stall;
        self.total_reward += reward;
        self.done = self.chunk_index >= MAX_CHUNKS || self.cursor >= self.trace_end;

        Ok(AbrStepOutcome {
            chunk: self.chunk_index - 1,
            action: action.0,
            chunk_mb,
            transmit,
            stall,
            idle,
            reward,
            done: self.done,
        })
    }
}

// ---------------------------------------------------------------------------
// Load-balancing environment
// ---------------------------------------------------------------------------

/// Job count per generated trace.
pub const LB_TRACE_LEN: usize = 650;
/// Inter-arrival exponential rate.
pub const LB_ARRIVAL_RATE: f64 = 55.0;
/// Pareto job-size scale (x_m) and shape (alpha).
pub const LB_PARETO_SCALE: f64 = 1.5;
pub const LB_PARETO_SHAPE: f64 = 100.0;

/// Generate a job trace: arrival times from Exp(rate = 55) inter-arrivals,
/// sizes from Pareto(x_m = 1.5, alpha = 100), exactly 650 jobs.
pub fn lb_generate(seed: u64) -> Trace {
    let mut rng = rng_from_seed(seed);
    let exp = Exp::new(LB_ARRIVAL_RATE).unwrap();
    let pareto = Pareto::new(LB_PARETO_SCALE, LB_PARETO_SHAPE).unwrap();
    let mut t = 0.0;
    let samples = (0..LB_TRACE_LEN)
        .map(|_| {
            t += exp.sample(&mut rng);
            (t, pareto.sample(&mut rng))
        })
        .collect();
    Trace {
        id: format!("lb_{seed:016x}"),
        kind: TraceKind::JobSizeSeries,
        samples,
        params: None,
        ground_truth_class: None,
    }
}

/// k-server FIFO queueing simulator; reward is the negated job completion
/// time.
pub struct LbEnv {
    jobs: Vec<(f64, f64)>,
    free_at: Vec<f64>,
    next_job: usize,
}

impl LbEnv {
    pub fn new(trace: &Trace, n_servers: usize) -> Result<LbEnv> {
        if trace.kind != TraceKind::JobSizeSeries || trace.samples.is_empty() {
            return Err(Error::invalid_trace(
                &trace.id,
                "LB episodes need a nonempty job-size series",
            ));
        }
        if n_servers == 0 {
            return Err(Error::InvalidInput("need at least one server".into()));
        }
        Ok(LbEnv {
            jobs: trace.samples.clone(),
            free_at: vec![0.0; n_servers],
            next_job: 0,
        })
    }

    pub fn action_count(&self) -> usize {
        self.free_at.len()
    }

    pub fn is_done(&self) -> bool {
        self.next_job >= self.jobs.len()
    }

    /// Next job's arrival gap and size plus each server's backlog at the
    /// arrival instant.
    pub fn observation(&self) -> Vec<f32> {
        let (arrival, size) = self.jobs[self.next_job.min(self.jobs.len() - 1)];
        let prev_arrival = if self.next_job == 0 {
            0.0
        } else {
            self.jobs[self.next_job - 1].0
        };
        let mut obs = vec![
            ((arrival - prev_arrival) * LB_ARRIVAL_RATE) as f32,
            (size / LB_PARETO_SCALE) as f32,
        ];
        for &f in &self.free_at {
            obs.push(((f - arrival).max(0.0) / LB_PARETO_SCALE) as f32);
        }
        obs
    }

    pub fn observation_len(n_servers: usize) -> usize {
        2 + n_servers
    }

    /// Assign the next job to `server`; returns (reward, done).
    pub fn step(&mut self, server: usize) -> Result<(f64, bool)> {
        if self.is_done() {
            return Err(Error::EpisodeFinished);
        }
        if server >= self.free_at.len() {
            return Err(Error::InvalidAction(format!(
                "server index {server} out of range (have {})",
                self.free_at.len()
            )));
        }
        let (arrival, size) = self.jobs[self.next_job];
        let start = self.free_at[server].max(arrival);
        let completion = start + size;
        self.free_at[server] = completion;
        self.next_job += 1;
        Ok((-(completion - arrival), self.is_done()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn flat_trace(throughput: f64, seconds: usize) -> Trace {
        Trace {
            id: format!("flat{throughput}"),
            kind: TraceKind::ThroughputSeries,
            samples: (0..seconds).map(|t| (t as f64, throughput)).collect(),
            params: None,
            ground_truth_class: None,
        }
    }

    #[test]
    fn absorbing_high_state_is_constant() {
        let cfg = TraceGenConfig {
            class: TraceClass::FastLowVar,
            markov: (0.0, 0.3),
            levels: (8.0, 4.0),
            noise_sigma: 0.0,
            duration: 50.0,
            step: 1.0,
            seed: 5,
        };
        let trace = generate_trace(&cfg).unwrap();
        assert!(trace.samples.iter().all(|&(_, v)| v == 8.0));
    }

    #[test]
    fn symmetric_chain_spends_half_time_high() {
        let cfg = TraceGenConfig {
            class: TraceClass::FastHighVar,
            markov: (0.5, 0.5),
            levels: (8.0, 4.0),
            noise_sigma: 0.0,
            duration: 100.0,
            step: 1e-3, // 1e5 steps within the duration cap
            seed: 11,
        };
        let trace = generate_trace(&cfg).unwrap();
        assert_eq!(trace.samples.len(), 100_000);
        let high = trace.samples.iter().filter(|&&(_, v)| v == 8.0).count();
        let frac = high as f64 / trace.samples.len() as f64;
        assert!((frac - 0.5).abs() < 0.02, "high fraction {frac}");
    }

    #[test]
    fn high_variance_class_has_higher_cv() {
        let cv = |class: TraceClass, seed: u64| {
            let cfg = TraceGenConfig::for_class(class, seed);
            let t = generate_trace(&cfg).unwrap();
            let vals = t.values();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
            var.sqrt() / m
        };
        let mut wins = 0;
        for seed in 0..100 {
            if cv(TraceClass::SlowHighVar, seed) > cv(TraceClass::SlowLowVar, seed + 7000) {
                wins += 1;
            }
        }
        assert!(
            wins >= 95,
            "high-var CV exceeded low-var in {wins}/100 seeds"
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a = build_dataset(DatasetKind::Balanced, 40, 3).unwrap();
        let b = build_dataset(DatasetKind::Balanced, 40, 3).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.samples, y.samples);
        }
    }

    #[test]
    fn balanced_counts_are_even() {
        let ds = build_dataset(DatasetKind::Balanced, 400, 1).unwrap();
        for class in TraceClass::ALL {
            let count = ds
                .traces
                .iter()
                .filter(|t| t.ground_truth_class.as_deref() == Some(class.name()))
                .count();
            assert_eq!(count, 100);
        }
    }

    #[test]
    fn majority_fast_outnumbers_slow() {
        let ds = build_dataset(DatasetKind::MajorityFast, 400, 2).unwrap();
        let fast = ds
            .traces
            .iter()
            .filter(|t| {
                t.ground_truth_class
                    .as_deref()
                    .map(|c| c.starts_with("fast"))
                    == Some(true)
            })
            .count();
        let slow = ds.len() - fast;
        assert!(fast >= 3 * slow, "fast {fast} vs slow {slow}");
    }

    #[test]
    fn disjoint_seeds_share_no_ids() {
        let a = build_dataset(DatasetKind::Balanced, 40, 10).unwrap();
        let b = build_dataset(DatasetKind::Balanced, 40, 11).unwrap();
        for t in &a.traces {
            assert!(b.trace_by_id(&t.id).is_none());
        }
    }

    #[test]
    fn class_statistics_separate_into_four_clusters() {
        let mut raw = Array2::zeros((100, 2));
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for (ci, class) in TraceClass::ALL.iter().enumerate() {
            for i in 0..25 {
                let cfg = TraceGenConfig::for_class(*class, (ci * 100 + i) as u64);
                let t = generate_trace(&cfg).unwrap();
                let vals = t.values();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
                let row = ci * 25 + i;
                raw[(row, 0)] = m;
                raw[(row, 1)] = var.sqrt() / m;
                labels.push(ci);
                ids.push(format!("t{row}"));
            }
        }
        let specs = vec![
            crate::features::FeatureSpec::Mean,
            crate::features::FeatureSpec::VariationCoefficient,
        ];
        let matrix = FeatureMatrix::from_raw(specs, ids, raw).unwrap();
        let sil = crate::clustering::silhouette_score(&matrix, &labels).unwrap();
        assert!(sil > 0.5, "class silhouette {sil}");
    }

    #[test]
    fn fast_link_never_stalls_at_top_bitrate() {
        let trace = flat_trace(10.0, 100);
        let mut env = AbrEnv::with_config(
            &trace,
            1,
            AbrConfig {
                chunk_size_std_frac: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let mut total = 0.0;
        let mut steps = 0;
        while !env.is_done() {
            let out = env.step(AbrAction(2)).unwrap();
            assert_eq!(out.stall, 0.0);
            total += out.reward;
            steps += 1;
        }
        assert_eq!(steps, 100);
        assert_abs_diff_eq!(total, 100.0 * 6.0, epsilon = 1e-9);
    }

    #[test]
    fn slow_link_stalls_every_chunk_at_top_bitrate() {
        let trace = flat_trace(0.5, 100);
        let mut env = AbrEnv::with_config(
            &trace,
            2,
            AbrConfig {
                chunk_size_std_frac: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        // Fluid oracle on a constant link: dt = 6/0.5 = 12 s every chunk,
        // buffer gains 1 s per chunk so stall = 12 - buffer > 0 for every
        // chunk once playback has started.
        let mut expected_buffer = 0.0f64;
        while !env.is_done() {
            let chunk = env.chunk_index();
            let out = env.step(AbrAction(2)).unwrap();
            assert_abs_diff_eq!(out.transmit, 12.0, epsilon = 1e-9);
            if chunk == 0 {
                assert_eq!(out.stall, 0.0, "startup download is not a stall");
                expected_buffer = 1.0;
            } else {
                let expected_stall = (12.0 - expected_buffer).max(0.0);
                assert!(out.stall > 0.0);
                assert_abs_diff_eq!(out.stall, expected_stall, epsilon = 1e-9);
                expected_buffer = (expected_buffer - 12.0).max(0.0) + 1.0;
            }
        }
    }

    #[test]
    fn buffer_cap_is_respected() {
        let trace = flat_trace(100.0, 100);
        let mut env = AbrEnv::with_config(
            &trace,
            3,
            AbrConfig {
                chunk_size_std_frac: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let mut hit_cap = false;
        while !env.is_done() {
            let out = env.step(AbrAction(0)).unwrap();
            assert!(env.buffer <= MAX_BUFFER_SECONDS + 1e-9);
            if env.buffer >= MAX_BUFFER_SECONDS - 1e-9 {
                hit_cap = true;
                assert!(out.idle > 0.0 || out.chunk == 14);
            }
        }
        assert!(hit_cap);
    }

    #[test]
    fn wall_time_conservation() {
        let cfg = TraceGenConfig::for_class(TraceClass::FastHighVar, 77);
        let trace = generate_trace(&cfg).unwrap();
        let mut env = AbrEnv::new(&trace, 7).unwrap();
        let mut rng = rng_from_seed(9);
        while !env.is_done() {
            let a = rng.random_range(0..3);
            env.step(AbrAction(a)).unwrap();
        }
        let (transmit, idle, _, _) = env.totals();
        assert_abs_diff_eq!(env.wall_time(), transmit + idle, epsilon = 1e-9);
    }

    #[test]
    fn stepping_finished_episode_errors() {
        let trace = flat_trace(10.0, 3);
        let mut env = AbrEnv::new(&trace, 1).unwrap();
        while !env.is_done() {
            env.step(AbrAction(0)).unwrap();
        }
        assert!(matches!(
            env.step(AbrAction(0)),
            Err(Error::EpisodeFinished)
        ));
    }

    #[test]
    fn higher_stall_penalty_never_increases_reward() {
        let cfg = TraceGenConfig::for_class(TraceClass::SlowHighVar, 13);
        let trace = generate_trace(&cfg).unwrap();
        let run = |mu: f64| -> f64 {
            let mut env = AbrEnv::with_config(
                &trace,
                5,
                AbrConfig {
                    stall_penalty: mu,
                    chunk_size_std_frac: 0.05,
                },
            )
            .unwrap();
            let mut rng = rng_from_seed(31);
            let mut total = 0.0;
            while !env.is_done() {
                total += env.step(AbrAction(rng.random_range(0..3))).unwrap().reward;
            }
            total
        };
        let mut prev = run(0.0);
        for mu in [2.0, 6.0, 12.0] {
            let r = run(mu);
            assert!(
                r <= prev + 1e-9,
                "reward rose from {prev} to {r} at mu={mu}"
            );
            prev = r;
        }
    }

    #[test]
    fn lb_trace_has_exactly_650_jobs() {
        let t = lb_generate(3);
        assert_eq!(t.samples.len(), LB_TRACE_LEN);
        t.validate().unwrap();
    }

    #[test]
    fn single_server_matches_lindley_recursion() {
        let trace = lb_generate(17);
        let mut env = LbEnv::new(&trace, 1).unwrap();
        // Independent single-queue recursion: waiting time
        // W_{j+1} = max(0, W_j + s_j - tau_{j+1}), completion = wait + size.
        let mut wait = 0.0f64;
        let mut prev: Option<(f64, f64)> = None;
        let mut job = 0;
        while !env.is_done() {
            let (arrival, size) = trace.samples[job];
            if let Some((pa, ps)) = prev {
                wait = (wait + ps - (arrival - pa)).max(0.0);
            }
            let (reward, _) = env.step(0).unwrap();
            assert_abs_diff_eq!(-reward, wait + size, epsilon = 1e-9);
            prev = Some((arrival, size));
            job += 1;
        }
    }

    #[test]
    fn idle_servers_are_symmetric_for_one_job() {
        let trace = Trace {
            id: "one".into(),
            kind: TraceKind::JobSizeSeries,
            samples: vec![(1.0, 2.5)],
            params: None,
            ground_truth_class: None,
        };
        for server in 0..2 {
            let mut env = LbEnv::new(&trace, 2).unwrap();
            let (reward, done) = env.step(server).unwrap();
            assert!(done);
            assert_abs_diff_eq!(reward, -2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn invalid_server_index_errors() {
        let trace = lb_generate(19);
        let mut env = LbEnv::new(&trace, 3).unwrap();
        assert!(matches!(env.step(5), Err(Error::InvalidAction(_))));
    }
}
