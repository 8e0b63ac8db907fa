//! Desk-scale value learner: n-step Q-learning with experience replay,
//! epsilon-greedy annealing, optional dueling/double heads and proportional
//! PER, plus the training loop that wires trace sampling, acting, and
//! function learning together.

pub mod replay;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::str::FromStr;
use std::sync::mpsc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterModel;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{Adam, QNetwork};
use crate::prioritization::{
    static_weights, two_class_equal_weights, CategoricalDistribution, DynamicConfig,
    DynamicPrioritizer, EpisodeResult, TraceSelector,
};
use crate::rng::{derive_seed, derive_seed_indexed, rng_from_seed};
use crate::trace::{discounted_return, ReturnSpec, TraceDataset};
use crate::tracebench::{AbrAction, AbrConfig, AbrEnv, HISTORY_LEN};

pub use replay::{NStepAccumulator, PerConfig, ReplayBuffer, Transition};

/// Learner hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Framestack depth; must match the environment's history window.
    pub history_len: usize,
    pub n_step: usize,
    pub gamma: f64,
    pub lr: f32,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Env steps between target-network syncs.
    pub target_sync_interval: u64,
    pub hidden_sizes: Vec<usize>,
    pub dueling: bool,
    pub double: bool,
    pub per: Option<PerConfig>,
    /// Env steps per learner step.
    pub learn_every: u64,
    /// Minimum replay fill before learning starts.
    pub warmup_steps: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            history_len: HISTORY_LEN,
            n_step: 7,
            gamma: 0.975,
            lr: 1e-4,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 30_000,
            replay_capacity: 50_000,
            batch_size: 32,
            target_sync_interval: 2_500,
            hidden_sizes: vec![256, 256],
            dueling: false,
            double: false,
            per: None,
            learn_every: 4,
            warmup_steps: 1_000,
            seed: 0,
        }
    }
}

/// Epsilon-greedy action: uniform with probability `epsilon`, else the
/// greedy action with ties broken toward the lowest index.
pub fn act(state: &[f32], network: &QNetwork, epsilon: f64, rng: &mut impl Rng) -> usize {
    let x = Array2::from_shape_fn((1, state.len()), |(_, j)| state[j]);
    let q = network.forward(&x);
    let actions = q.ncols();
    if epsilon > 0.0 && rng.random_range(0.0..1.0) < epsilon {
        return rng.random_range(0..actions);
    }
    let mut best = 0;
    for a in 1..actions {
        if q[(0, a)] > q[(0, best)] {
            best = a;
        }
    }
    best
}

/// One TD update on a sampled batch. Returns the mean (importance-weighted)
/// squared TD error, or `None` when the replay cannot fill a batch yet.
pub fn learn_step(
    replay: &mut ReplayBuffer,
    net: &mut QNetwork,
    target: &QNetwork,
    opt: &mut Adam,
    cfg: &AgentConfig,
    learn_calls: u64,
    rng: &mut impl Rng,
) -> Option<f64> {
    if replay.len() < cfg.batch_size {
        return None;
    }
    let batch = replay.sample(cfg.batch_size, learn_calls, rng);
    let dim = batch.transitions[0].state.len();
    let n = batch.transitions.len();
    let x = Array2::from_shape_fn((n, dim), |(i, j)| batch.transitions[i].state[j]);
    let x_next = Array2::from_shape_fn((n, dim), |(i, j)| batch.transitions[i].next_state[j]);

    let q_next_target = target.forward(&x_next);
    let q_next_online = if cfg.double {
        Some(net.forward(&x_next))
    } else {
        None
    };
    let mut targets = vec![0.0f64; n];
    for (i, tr) in batch.transitions.iter().enumerate() {
        let bootstrap = if tr.done {
            0.0
        } else {
            let a_star = match &q_next_online {
                Some(q_online) => {
                    let mut best = 0;
                    for a in 1..q_online.ncols() {
                        if q_online[(i, a)] > q_online[(i, best)] {
                            best = a;
                        }
                    }
                    best
                }
                None => {
                    let mut best = 0;
                    for a in 1..q_next_target.ncols() {
                        if q_next_target[(i, a)] > q_next_target[(i, best)] {
                            best = a;
                        }
                    }
                    best
                }
            };
            f64::from(q_next_target[(i, a_star)])
        };
        targets[i] = tr.n_step_reward + cfg.gamma.powi(tr.steps as i32) * bootstrap;
    }

    let (cache, q) = net.forward_cached(&x);
    let mut grad = Array2::zeros(q.raw_dim());
    let mut td_errors = Vec::with_capacity(n);
    let mut loss = 0.0;
    for (i, tr) in batch.transitions.iter().enumerate() {
        let td = f64::from(q[(i, tr.action)]) - targets[i];
        let w = batch.weights[i];
        loss += w * td * td;
        grad[(i, tr.action)] = (2.0 * w * td / n as f64) as f32;
        td_errors.push(td);
    }
    net.apply_grad(opt, &cache, &grad);
    let indices = batch.indices;
    replay.update_priorities(&indices, &td_errors);
    Some(loss / n as f64)
}

/// Which trace sampler feeds the actors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    TwoClass,
    PlumeStatic,
    PlumeDynamic,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Random => "random",
            SamplerKind::TwoClass => "two_class",
            SamplerKind::PlumeStatic => "plume_static",
            SamplerKind::PlumeDynamic => "plume_dynamic",
        }
    }

    pub fn needs_clustering(self) -> bool {
        matches!(self, SamplerKind::PlumeStatic | SamplerKind::PlumeDynamic)
    }
}

impl FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SamplerKind> {
        match s {
            "random" => Ok(SamplerKind::Random),
            "two_class" => Ok(SamplerKind::TwoClass),
            "plume_static" => Ok(SamplerKind::PlumeStatic),
            "plume_dynamic" => Ok(SamplerKind::PlumeDynamic),
            other => Err(Error::InvalidInput(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Cluster assignments and standardized features for the plume samplers.
pub struct ClusteringInputs<'a> {
    pub model: &'a ClusterModel,
    pub matrix: &'a FeatureMatrix,
}

/// Full training-run settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub total_env_steps: u64,
    /// Logical actors stepped round-robin.
    pub actors: usize,
    pub eval_interval: u64,
    /// Evaluate on a fixed stride-subset of the held-out set (None = all).
    pub eval_subset: Option<usize>,
    pub abr: AbrConfig,
    pub dynamic: DynamicConfig,
    pub two_class_threshold: f64,
    /// Reward shaping applied before storage and for episode returns.
    pub return_spec: ReturnSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            agent: AgentConfig::default(),
            total_env_steps: 100_000,
            actors: 4,
            eval_interval: 10_000,
            eval_subset: None,
            abr: AbrConfig::default(),
            dynamic: DynamicConfig::default(),
            two_class_threshold: 2.0,
            return_spec: ReturnSpec {
                gamma: 0.975,
                normalize: true,
                epsilon: 1e-2,
                clip: (-32.0, 32.0),
            },
            seed: 0,
        }
    }
}

/// Held-out evaluation summary (raw, unnormalized episode returns).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mean_return: f64,
    pub per_class: BTreeMap<String, f64>,
    pub n_traces: usize,
}

/// One metrics row per evaluation checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub mean_return: f64,
    pub per_class: BTreeMap<String, f64>,
    pub weights_version: u64,
}

/// Weight-table publish event.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightLogEntry {
    pub step: u64,
    pub version: u64,
    pub weights: Vec<f64>,
}

/// Everything a training run produces.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoints: Vec<CheckpointMetrics>,
    pub weights_log: Vec<WeightLogEntry>,
    /// Category ids of the sampling distribution, aligned with weights.
    pub categories: Vec<usize>,
    /// Majority ground-truth class per category (diagnostics only).
    pub category_classes: Vec<String>,
    pub per_category_episodes: Vec<u64>,
    pub episodes: u64,
    pub final_net: QNetwork,
}

/// All evaluation streams share one fixed seed so every run sees identical
/// held-out conditions.
const EVAL_SEED: u64 = 0xE7A1;

/// Greedy evaluation over (a stride-subset of) the dataset; returns raw
/// QoE episode returns, overall and per ground-truth class.
pub fn evaluate(
    net: &QNetwork,
    dataset: &TraceDataset,
    abr: AbrConfig,
    subset: Option<usize>,
) -> Result<EvalMetrics> {
    let stride = match subset {
        Some(k) if k > 0 && k < dataset.len() => dataset.len().div_ceil(k),
        _ => 1,
    };
    let mut rng = rng_from_seed(EVAL_SEED);
    let mut total = 0.0;
    let mut count = 0usize;
    let mut class_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for trace in dataset.traces.iter().step_by(stride) {
        let mut env = AbrEnv::with_config(trace, derive_seed(EVAL_SEED, &trace.id), abr)?;
        let mut episode = 0.0;
        while !env.is_done() {
            let action = act(&env.observation(), net, 0.0, &mut rng);
            episode += env.step(AbrAction(action))?.reward;
        }
        total += episode;
        count += 1;
        let class = trace
            .ground_truth_class
            .clone()
            .unwrap_or_else(|| "unknown".into());
        let entry = class_sum.entry(class).or_insert((0.0, 0));
        entry.0 += episode;
        entry.1 += 1;
    }
    Ok(EvalMetrics {
        mean_return: total / count as f64,
        per_class: class_sum
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
        n_traces: count,
    })
}

struct ActorSlot {
    env: AbrEnv,
    acc: NStepAccumulator,
    raw_rewards: Vec<f64>,
    trace_id: String,
    category: usize,
    obs: Vec<f32>,
}

/// Run the full loop: the sampler yields traces, actors roll episodes,
/// transitions feed the replay, episode results feed the prioritizer, and
/// the learner takes periodic TD steps. Deterministic given the config.
pub fn train(
    train_set: &TraceDataset,
    test_set: &TraceDataset,
    sampler: SamplerKind,
    clustering: Option<ClusteringInputs<'_>>,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    if cfg.agent.history_len != HISTORY_LEN {
        return Err(Error::InvalidInput(format!(
            "history_len {} does not match the environment window {HISTORY_LEN}",
            cfg.agent.history_len
        )));
    }
    if cfg.actors == 0 {
        return Err(Error::InvalidInput("need at least one actor".into()));
    }
    cfg.return_spec.validate()?;
    let test_ids: HashSet<&str> = test_set.traces.iter().map(|t| t.id.as_str()).collect();
    for t in &train_set.traces {
        if test_ids.contains(t.id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "trace `{}` appears in both train and test sets",
                t.id
            )));
        }
    }

    // Sampling distribution + initial weights.
    let all_ids: Vec<String> = train_set.traces.iter().map(|t| t.id.clone()).collect();
    let (dist, dynamic_inputs) = match sampler {
        SamplerKind::Random => (
            CategoricalDistribution::from_labels(&all_ids, &vec![0usize; all_ids.len()])?,
            None,
        ),
        SamplerKind::TwoClass => {
            let (dist, _) = two_class_equal_weights(train_set, cfg.two_class_threshold)?;
            (dist, None)
        }
        SamplerKind::PlumeStatic | SamplerKind::PlumeDynamic => {
            let inputs = clustering.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "sampler `{}` needs a clustered dataset",
                    sampler.name()
                ))
            })?;
            let dist = CategoricalDistribution::from_cluster_model(inputs.model)?;
            (dist, Some(inputs))
        }
    };
    let selector = TraceSelector::new(dist);
    match sampler {
        SamplerKind::TwoClass => {
            let (_, table) = two_class_equal_weights(train_set, cfg.two_class_threshold)?;
            selector.publish(table.weights)?;
        }
        SamplerKind::PlumeStatic => {
            let table = static_weights(selector.distribution(), 0)?;
            selector.publish(table.weights)?;
        }
        // Random keeps W == 1; dynamic starts at W == 1 until cold start ends.
        SamplerKind::Random | SamplerKind::PlumeDynamic => {}
    }

    // Feature rows for the dynamic predictor.
    let feature_rows: HashMap<String, Vec<f64>> = match &dynamic_inputs {
        Some(inputs) if sampler == SamplerKind::PlumeDynamic => inputs
            .matrix
            .trace_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), inputs.matrix.row(i).to_vec()))
            .collect(),
        _ => HashMap::new(),
    };
    let mut prioritizer = if sampler == SamplerKind::PlumeDynamic {
        let inputs = dynamic_inputs.as_ref().unwrap();
        Some(DynamicPrioritizer::new(
            inputs.matrix.cols(),
            selector.distribution().len(),
            &cfg.dynamic,
            derive_seed(cfg.seed, "predictor"),
        ))
    } else {
        None
    };
    let (result_tx, result_rx) = mpsc::channel::<EpisodeResult>();

    // Majority ground-truth class per category, for diagnostics and weight
    // trajectory analysis.
    let category_classes: Vec<String> = selector
        .distribution()
        .members
        .iter()
        .map(|members| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for id in members {
                if let Some(t) = train_set.trace_by_id(id) {
                    if let Some(c) = &t.ground_truth_class {
                        *counts.entry(c.as_str()).or_insert(0) += 1;
                    }
                }
            }
            counts
                .into_iter()
                .max_by_key(|&(_, n)| n)
                .map(|(c, _)| c.to_string())
                .unwrap_or_else(|| "unknown".into())
        })
        .collect();

    // Networks and rngs.
    let obs_dim = AbrEnv::observation_len();
    let mut init_rng = rng_from_seed(derive_seed(cfg.agent.seed, "qnet-init"));
    let mut net = QNetwork::new(
        obs_dim,
        &cfg.agent.hidden_sizes,
        3,
        cfg.agent.dueling,
        &mut init_rng,
    );
    let mut target = net.clone();
    let mut actor_net = net.clone();
    let mut opt = Adam::for_qnet(&net, cfg.agent.lr);
    let mut replay = ReplayBuffer::new(cfg.agent.replay_capacity, cfg.agent.per);
    let mut sampler_rng = rng_from_seed(derive_seed(cfg.seed, "trace-sampler"));
    let mut action_rng = rng_from_seed(derive_seed(cfg.agent.seed, "actions"));
    let mut learner_rng = rng_from_seed(derive_seed(cfg.agent.seed, "learner"));

    let mut episode_counter: u64 = 0;
    let start_episode =
        |sampler_rng: &mut ChaCha8Rng, episode_counter: &mut u64| -> Result<ActorSlot> {
            let (trace_id, _) = selector.sample(sampler_rng);
            let trace_id = trace_id.to_string();
            debug_assert!(
                !test_ids.contains(trace_id.as_str()),
                "held-out trace sampled for training"
            );
            let trace = train_set.trace_by_id(&trace_id).ok_or_else(|| {
                Error::InvalidInput(format!("trace `{trace_id}` not in train set"))
            })?;
            let env = AbrEnv::with_config(
                trace,
                derive_seed_indexed(cfg.seed, "episode", *episode_counter),
                cfg.abr,
            )?;
            *episode_counter += 1;
            let obs = env.observation();
            Ok(ActorSlot {
                env,
                acc: NStepAccumulator::new(cfg.agent.n_step, cfg.agent.gamma),
                raw_rewards: Vec::new(),
                trace_id: trace_id.clone(),
                category: selector.category_of(&trace_id).unwrap_or(0),
                obs,
            })
        };

    let mut slots: Vec<ActorSlot> = (0..cfg.actors)
        .map(|_| start_episode(&mut sampler_rng, &mut episode_counter))
        .collect::<Result<_>>()?;

    let eps_at = |step: u64| -> f64 {
        let frac = (step as f64 / cfg.agent.eps_anneal_steps.max(1) as f64).min(1.0);
        cfg.agent.eps_start + (cfg.agent.eps_end - cfg.agent.eps_start) * frac
    };

    let mut checkpoints = Vec::new();
    let mut weights_log = vec![{
        let snap = selector.snapshot();
        WeightLogEntry {
            step: 0,
            version: snap.version,
            weights: snap.weights.clone(),
        }
    }];
    let mut per_category_episodes = vec![0u64; selector.distribution().len()];
    let mut finished_episodes: u64 = 0;
    let mut learn_calls: u64 = 0;
    let mut step: u64 = 0;
    let mut last_eval: Option<u64> = None;

    let record_checkpoint = |step: u64,
                             net: &QNetwork,
                             checkpoints: &mut Vec<CheckpointMetrics>,
                             last_eval: &mut Option<u64>|
     -> Result<()> {
        if *last_eval == Some(step) {
            return Ok(());
        }
        let metrics = evaluate(net, test_set, cfg.abr, cfg.eval_subset)?;
        checkpoints.push(CheckpointMetrics {
            step,
            mean_return: metrics.mean_return,
            per_class: metrics.per_class,
            weights_version: selector.snapshot().version,
        });
        *last_eval = Some(step);
        Ok(())
    };

    record_checkpoint(0, &net, &mut checkpoints, &mut last_eval)?;

    'training: loop {
        for slot in slots.iter_mut() {
            if step >= cfg.total_env_steps {
                break 'training;
            }
            let action = act(&slot.obs, &actor_net, eps_at(step), &mut action_rng);
            let outcome = slot.env.step(AbrAction(action))?;
            let shaped = cfg.return_spec.shape(outcome.reward);
            let next_obs = slot.env.observation();
            for tr in slot
                .acc
                .push(slot.obs.clone(), action, shaped, &next_obs, outcome.done)
            {
                replay.push(tr);
            }
            slot.obs = next_obs;
            slot.raw_rewards.push(outcome.reward);
            step += 1;

            if outcome.done {
                finished_episodes += 1;
                per_category_episodes[slot.category] += 1;
                if prioritizer.is_some() {
                    let return_g = discounted_return(&slot.raw_rewards, &cfg.return_spec)?;
                    if let Some(features) = feature_rows.get(&slot.trace_id) {
                        result_tx
                            .send(EpisodeResult {
                                trace_id: slot.trace_id.clone(),
                                category: slot.category,
                                return_g,
                                features: features.clone(),
                                step,
                            })
                            .expect("episode-result queue closed");
                    }
                }
                *slot = start_episode(&mut sampler_rng, &mut episode_counter)?;
            }

            if step.is_multiple_of(cfg.agent.learn_every)
                && replay.len() >= cfg.agent.warmup_steps
                && learn_step(
                    &mut replay,
                    &mut net,
                    &target,
                    &mut opt,
                    &cfg.agent,
                    learn_calls,
                    &mut learner_rng,
                )
                .is_some()
            {
                learn_calls += 1;
            }
            if step.is_multiple_of(cfg.agent.target_sync_interval) {
                target = net.clone();
                actor_net = net.clone();
            }

            if let Some(dp) = &mut prioritizer {
                while let Ok(result) = result_rx.try_recv() {
                    dp.record(result);
                }
                let current = selector.snapshot().version;
                if let Some(table) = dp.maybe_update(selector.distribution(), current)? {
                    let entry = WeightLogEntry {
                        step,
                        version: table.version,
                        weights: table.weights.clone(),
                    };
                    selector.publish_table(table)?;
                    weights_log.push(entry);
                }
            }

            if step.is_multiple_of(cfg.eval_interval) || step >= cfg.total_env_steps {
                record_checkpoint(step, &net, &mut checkpoints, &mut last_eval)?;
            }
        }
    }
    record_checkpoint(step, &net, &mut checkpoints, &mut last_eval)?;

    if let Some(dp) = &prioritizer {
        if weights_log.len() <= 1 {
            log::warn!(
                "dynamic prioritization never activated: {} episodes finished but the cold \
                 start needs {} (update cadence x multiplier); lower update_every_episodes or \
                 raise the step budget",
                dp.episodes_seen(),
                cfg.dynamic.update_every_episodes * cfg.dynamic.cold_start_multiplier,
            );
        }
    }

    Ok(TrainOutput {
        checkpoints,
        weights_log,
        categories: selector.distribution().categories.clone(),
        category_classes,
        per_category_episodes,
        episodes: finished_episodes,
        final_net: net,
    })
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

pub const METRICS_SCHEMA: &str = "# schema=plume.metrics.v1";
pub const WEIGHTS_SCHEMA_VERSION: u32 = 1;

/// Metrics CSV: step, overall mean return, one column per ground-truth
/// class, and the weight-table version in effect.
pub fn write_metrics_csv<W: std::io::Write>(
    mut w: W,
    checkpoints: &[CheckpointMetrics],
) -> std::io::Result<()> {
    writeln!(w, "{METRICS_SCHEMA}")?;
    let classes: Vec<String> = checkpoints
        .first()
        .map(|c| c.per_class.keys().cloned().collect())
        .unwrap_or_default();
    let mut header = String::from("step,mean_return");
    for c in &classes {
        header.push_str(&format!(",return_{c}"));
    }
    header.push_str(",weights_version");
    writeln!(w, "{header}")?;
    for cp in checkpoints {
        let mut line = format!("{},{}", cp.step, cp.mean_return);
        for c in &classes {
            line.push_str(&format!(
                ",{}",
                cp.per_class.get(c).copied().unwrap_or(f64::NAN)
            ));
        }
        line.push_str(&format!(",{}", cp.weights_version));
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WeightsFile {
    pub schema_version: u32,
    pub sampler: String,
    pub categories: Vec<usize>,
    pub category_classes: Vec<String>,
    pub entries: Vec<WeightLogEntry>,
}

/// Per-version weight trajectory (the data behind relative-weight plots).
pub fn weights_file(output: &TrainOutput, sampler: SamplerKind) -> WeightsFile {
    WeightsFile {
        schema_version: WEIGHTS_SCHEMA_VERSION,
        sampler: sampler.name().to_string(),
        categories: output.categories.clone(),
        category_classes: output.category_classes.clone(),
        entries: output.weights_log.clone(),
    }
}

#[derive(Serialize, Deserialize)]
struct NetCheckpoint {
    schema_version: u32,
    obs_dim: usize,
    net: QNetwork,
}

pub fn save_checkpoint(net: &QNetwork, path: &std::path::Path) -> Result<()> {
    let ckpt = NetCheckpoint {
        schema_version: 1,
        obs_dim: AbrEnv::observation_len(),
        net: net.clone(),
    };
    let mut bytes = serde_json::to_vec(&ckpt).map_err(|e| Error::malformed(path, e.to_string()))?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<QNetwork> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: NetCheckpoint =
        serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
    if ckpt.schema_version != 1 {
        return Err(Error::malformed(
            path,
            format!("unsupported checkpoint schema {}", ckpt.schema_version),
        ));
    }
    Ok(ckpt.net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::QHead;
    use crate::tracebench::{build_dataset, DatasetKind};
    use approx::assert_abs_diff_eq;

    /// Net with constant Q values via zeroed weights and a bias vector.
    fn net_with_bias(bias: &[f32]) -> QNetwork {
        let mut rng = rng_from_seed(0);
        let mut net = QNetwork::new(4, &[8], bias.len(), false, &mut rng);
        for layer in net.trunk.layers.iter_mut() {
            layer.w.fill(0.0);
            layer.b.fill(0.0);
        }
        if let QHead::Single(out) = &mut net.head {
            out.w.fill(0.0);
            for (b, &v) in out.b.iter_mut().zip(bias) {
                *b = v;
            }
        }
        net
    }

    #[test]
    fn greedy_action_is_argmax() {
        let net = net_with_bias(&[1.0, 3.0, 2.0]);
        let mut rng = rng_from_seed(1);
        assert_eq!(act(&[0.0; 4], &net, 0.0, &mut rng), 1);
    }

    #[test]
    fn greedy_ties_break_low() {
        let net = net_with_bias(&[2.0, 2.0, 1.0]);
        let mut rng = rng_from_seed(2);
        assert_eq!(act(&[0.0; 4], &net, 0.0, &mut rng), 0);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let net = net_with_bias(&[1.0, 3.0, 2.0]);
        let mut rng = rng_from_seed(3);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            counts[act(&[0.0; 4], &net, 1.0, &mut rng)] += 1;
        }
        let expect = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - expect).abs() < 4.0 * sigma,
                "counts {counts:?} not uniform"
            );
        }
    }

    #[test]
    fn learn_step_noop_when_replay_small() {
        let cfg = AgentConfig {
            batch_size: 32,
            warmup_steps: 32,
            hidden_sizes: vec![8],
            ..Default::default()
        };
        let mut rng = rng_from_seed(4);
        let mut net = QNetwork::new(3, &[8], 2, false, &mut rng);
        let target = net.clone();
        let mut opt = Adam::for_qnet(&net, 1e-3);
        let mut replay = ReplayBuffer::new(64, None);
        assert!(learn_step(&mut replay, &mut net, &target, &mut opt, &cfg, 0, &mut rng).is_none());
    }

    #[test]
    fn zero_reward_mdp_drives_q_to_zero() {
        let cfg = AgentConfig {
            n_step: 1,
            gamma: 0.9,
            lr: 1e-3,
            batch_size: 32,
            warmup_steps: 32,
            hidden_sizes: vec![16],
            target_sync_interval: 50,
            ..Default::default()
        };
        let mut rng = rng_from_seed(5);
        let mut net = QNetwork::new(3, &[16], 2, false, &mut rng);
        let mut target = net.clone();
        let mut opt = Adam::for_qnet(&net, cfg.lr);
        let mut replay = ReplayBuffer::new(512, None);
        for i in 0..256 {
            let s = vec![(i % 3) as f32, 0.5, -0.5];
            replay.push(Transition {
                state: s.clone(),
                action: i % 2,
                n_step_reward: 0.0,
                next_state: vec![((i + 1) % 3) as f32, 0.5, -0.5],
                done: i % 17 == 0,
                steps: 1,
                priority: 0.0,
            });
        }
        for call in 0..4000u64 {
            learn_step(
                &mut replay,
                &mut net,
                &target,
                &mut opt,
                &cfg,
                call,
                &mut rng,
            )
            .unwrap();
            if call % 100 == 0 {
                target = net.clone();
            }
        }
        let x = Array2::from_shape_fn((3, 3), |(i, j)| match j {
            0 => i as f32,
            1 => 0.5,
            _ => -0.5,
        });
        let q = net.forward(&x);
        for v in q.iter() {
            assert!(v.abs() < 0.05, "Q did not vanish: {q:?}");
        }
    }

    /// Deterministic 3-state chain: advance pays 1 and moves right, stay
    /// pays 0. Terminal past state 2.
    fn chain_value_iteration(gamma: f64) -> [[f64; 2]; 2] {
        let mut q = [[0.0f64; 2]; 2];
        for _ in 0..500 {
            let v1 = q[1][0].max(q[1][1]);
            let v0 = q[0][0].max(q[0][1]);
            q[1] = [gamma * v1, 1.0];
            q[0] = [gamma * v0, 1.0 + gamma * v1];
        }
        q
    }

    fn one_hot(s: usize) -> Vec<f32> {
        let mut v = vec![0.0; 3];
        v[s] = 1.0;
        v
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn chain_mdp_matches_value_iteration() {
        let gamma = 0.9;
        let cfg = AgentConfig {
            n_step: 1,
            gamma,
            lr: 2e-3,
            batch_size: 32,
            warmup_steps: 64,
            hidden_sizes: vec![32, 32],
            ..Default::default()
        };
        let mut rng = rng_from_seed(6);
        let mut net = QNetwork::new(3, &cfg.hidden_sizes, 2, false, &mut rng);
        let mut target = net.clone();
        let mut opt = Adam::for_qnet(&net, cfg.lr);
        let mut replay = ReplayBuffer::new(4096, None);

        // Uniform-random behavior policy gathering experience.
        let mut state = 0usize;
        let mut horizon = 0;
        for _ in 0..4000 {
            let action = rng.random_range(0..2);
            let (next, reward) = if action == 1 {
                (state + 1, 1.0)
            } else {
                (state, 0.0)
            };
            let done = next == 2 || horizon >= 30;
            replay.push(Transition {
                state: one_hot(state),
                action,
                n_step_reward: reward,
                next_state: one_hot(next.min(2)),
                done,
                steps: 1,
                priority: 0.0,
            });
            if done {
                state = 0;
                horizon = 0;
            } else {
                state = next;
                horizon += 1;
            }
        }
        for call in 0..6000u64 {
            learn_step(
                &mut replay,
                &mut net,
                &target,
                &mut opt,
                &cfg,
                call,
                &mut rng,
            )
            .unwrap();
            if call % 200 == 0 {
                target = net.clone();
            }
        }
        let oracle = chain_value_iteration(gamma);
        for s in 0..2 {
            let x = Array2::from_shape_fn((1, 3), |(_, j)| one_hot(s)[j]);
            let q = net.forward(&x);
            for a in 0..2 {
                assert_abs_diff_eq!(f64::from(q[(0, a)]), oracle[s][a], epsilon = 1e-2);
            }
        }
    }

    fn tiny_train_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            agent: AgentConfig {
                hidden_sizes: vec![32, 32],
                eps_anneal_steps: 500,
                warmup_steps: 64,
                target_sync_interval: 200,
                replay_capacity: 4096,
                ..Default::default()
            },
            total_env_steps: steps,
            actors: 2,
            eval_interval: 500,
            eval_subset: Some(8),
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn train_is_deterministic() {
        let train_set = build_dataset(DatasetKind::Balanced, 16, 100).unwrap();
        let test_set = build_dataset(DatasetKind::Balanced, 8, 200).unwrap();
        let cfg = tiny_train_cfg(1200);
        let a = train(&train_set, &test_set, SamplerKind::Random, None, &cfg).unwrap();
        let b = train(&train_set, &test_set, SamplerKind::Random, None, &cfg).unwrap();
        assert_eq!(a.checkpoints.len(), b.checkpoints.len());
        for (x, y) in a.checkpoints.iter().zip(&b.checkpoints) {
            assert_eq!(x.step, y.step);
            assert_eq!(x.mean_return, y.mean_return);
            assert_eq!(x.per_class, y.per_class);
        }
        assert_eq!(a.episodes, b.episodes);
    }

    #[test]
    fn zero_steps_equals_fresh_policy_eval() {
        let train_set = build_dataset(DatasetKind::Balanced, 16, 101).unwrap();
        let test_set = build_dataset(DatasetKind::Balanced, 8, 201).unwrap();
        let cfg = tiny_train_cfg(0);
        let out = train(&train_set, &test_set, SamplerKind::Random, None, &cfg).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.checkpoints[0].step, 0);

        let mut rng = rng_from_seed(derive_seed(cfg.agent.seed, "qnet-init"));
        let fresh = QNetwork::new(
            AbrEnv::observation_len(),
            &cfg.agent.hidden_sizes,
            3,
            false,
            &mut rng,
        );
        let direct = evaluate(&fresh, &test_set, cfg.abr, cfg.eval_subset).unwrap();
        assert_abs_diff_eq!(
            out.checkpoints[0].mean_return,
            direct.mean_return,
            epsilon = 1e-12
        );
    }

    #[test]
    fn overlapping_train_test_rejected() {
        let ds = build_dataset(DatasetKind::Balanced, 12, 300).unwrap();
        let cfg = tiny_train_cfg(100);
        let err = train(&ds, &ds, SamplerKind::Random, None, &cfg).unwrap_err();
        assert!(err.to_string().contains("both train and test"));
    }

    #[test]
    fn plume_sampler_requires_clustering() {
        let train_set = build_dataset(DatasetKind::Balanced, 12, 301).unwrap();
        let test_set = build_dataset(DatasetKind::Balanced, 8, 302).unwrap();
        let cfg = tiny_train_cfg(100);
        let err = train(&train_set, &test_set, SamplerKind::PlumeStatic, None, &cfg).unwrap_err();
        assert!(err.to_string().contains("clustered"));
    }

    #[test]
    fn metrics_csv_has_schema_and_classes() {
        let cp = CheckpointMetrics {
            step: 10,
            mean_return: 1.5,
            per_class: [("fast_low_var".to_string(), 2.0)].into_iter().collect(),
            weights_version: 3,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[cp]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(METRICS_SCHEMA));
        assert!(text.contains("return_fast_low_var"));
        assert!(text.contains("10,1.5,2,3"));
    }
}
