//! `plume` — trace sampling experiments end to end: generate benchmark
//! datasets, extract and select features, cluster, train samplers against
//! each other, and export the metric/weight artifacts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{ArgAction, Parser, Subcommand};

use plume_core::agent::{
    evaluate, load_checkpoint, save_checkpoint, train, weights_file, write_metrics_csv,
    AgentConfig, ClusteringInputs, PerConfig, SamplerKind, TrainConfig, WeightsFile,
};
use plume_core::clustering::{search_clustering, ClusterModel};
use plume_core::features::{
    default_specs, extract_vectors, matrix_from_vectors, read_feature_csv, write_feature_csv,
    FeatureMatrix,
};
use plume_core::prioritization::DynamicConfig;
use plume_core::rng::derive_seed;
use plume_core::selection::{select_critical_features, SelectionConfig, SelectionReport};
use plume_core::trace::{load_dataset, save_dataset, TraceDataset};
use plume_core::tracebench::{
    build_dataset, scenario_kinds, AbrAction, AbrConfig, AbrEnv, DatasetKind,
};

/// Output root override; relative `--out` paths resolve under it.
const OUT_ROOT_ENV: &str = "PLUME_OUT_ROOT";

#[derive(Parser)]
#[command(name = "plume", version, about = "Prioritized trace sampling toolkit")]
struct Cli {
    /// Cap worker-thread concurrency (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a parametric benchmark dataset (JSON traces + manifest).
    GenTraces {
        /// majority_fast | balanced | majority_slow
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the feature catalog for every trace into a CSV.
    ExtractFeatures {
        /// Path to a dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-trace summary CSV here.
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Drop series traces shorter than this many seconds.
        #[arg(long)]
        min_duration: Option<f64>,
        /// Split long traces into segments of this many samples first.
        #[arg(long)]
        split_chunks: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the cluster/classify/eliminate loop and write the report.
    SelectFeatures {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        min_features: usize,
        #[arg(long, default_value_t = 0.25)]
        elimination_fraction: f64,
        #[arg(long, default_value_t = 0.5)]
        ig_threshold: f64,
    },
    /// Fit the cluster-count/seed search on a feature CSV.
    Cluster {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 3)]
        k_min: usize,
        #[arg(long, default_value_t = 7)]
        k_max: usize,
        /// Restarts per cluster count.
        #[arg(long, default_value_t = 10)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only the surviving specs of this selection report.
        #[arg(long)]
        select: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one sampler arm and write metrics, weights, and a checkpoint.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// random | two_class | plume_static | plume_dynamic
        #[arg(long)]
        sampler: String,
        /// Cluster model JSON (required for plume samplers).
        #[arg(long)]
        cluster_model: Option<PathBuf>,
        /// Feature CSV over the training set (required for plume samplers).
        #[arg(long)]
        features: Option<PathBuf>,
        /// Selection report; restricts features to the surviving specs.
        #[arg(long)]
        select: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        eval_interval: u64,
        /// Evaluate intermediate checkpoints on this many held-out traces.
        #[arg(long)]
        eval_subset: Option<usize>,
        #[arg(long, default_value_t = 2.0)]
        two_class_threshold: f64,
        /// Enable prioritized experience replay.
        #[arg(long)]
        per: bool,
        #[arg(long)]
        dueling: bool,
        #[arg(long)]
        double: bool,
        #[arg(long, value_delimiter = ',')]
        hidden: Option<Vec<usize>>,
        #[arg(long)]
        lr: Option<f32>,
        /// Dynamic prioritization update cadence, in episodes.
        #[arg(long)]
        update_every: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write per-chunk episode logs as JSON lines.
        #[arg(long)]
        episode_log: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-emit a run's weight-table time series.
    WeightsDump {
        /// Training run directory (reads weights.json inside).
        #[arg(long)]
        run: PathBuf,
        /// Write JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a tidy CSV (version,step,category,class,weight).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a full scenario end to end: generate, extract, select, cluster,
    /// train, evaluate.
    Bench {
        /// 1: train majority_fast / test majority_slow; 2: balanced both;
        /// 3: train majority_slow / test majority_fast.
        #[arg(long)]
        scenario: u32,
        #[arg(long, default_value = "plume_static")]
        sampler: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60_000)]
        steps: u64,
        #[arg(long, default_value_t = 400)]
        train_n: usize,
        #[arg(long, default_value_t = 200)]
        test_n: usize,
        /// Dynamic prioritization update cadence, in episodes.
        #[arg(long)]
        update_every: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not set --jobs: {e}");
        }
    }

    let (stage, result) = run(cli.command);
    if let Err(err) = result {
        eprintln!("error in {stage}: {err:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> (&'static str, Result<()>) {
    match command {
        c @ Command::GenTraces { .. } => ("gen-traces", gen_traces(c)),
        c @ Command::ExtractFeatures { .. } => ("extract-features", extract_features_cmd(c)),
        c @ Command::SelectFeatures { .. } => ("select-features", select_features_cmd(c)),
        c @ Command::Cluster { .. } => ("cluster", cluster_cmd(c)),
        c @ Command::Train { .. } => ("train", train_cmd(c)),
        c @ Command::Eval { .. } => ("eval", eval_cmd(c)),
        c @ Command::WeightsDump { .. } => ("weights-dump", weights_dump_cmd(c)),
        c @ Command::Bench { .. } => ("bench", bench_cmd(c)),
    }
}

fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return Path::new(&root).join(path);
        }
    }
    path
}

fn gen_traces(cmd: Command) -> Result<()> {
    let Command::GenTraces { kind, n, seed, out } = cmd else {
        unreachable!()
    };
    let kind: DatasetKind = kind.parse()?;
    let out = resolve_out(out);
    let dataset = build_dataset(kind, n, derive_seed(seed, "gen-traces"))?;
    let manifest = save_dataset(&dataset, &out)?;
    println!(
        "wrote {} traces, manifest {}",
        dataset.len(),
        manifest.display()
    );
    Ok(())
}

fn load_and_prepare(
    manifest: &Path,
    min_duration: Option<f64>,
    split_chunks: Option<usize>,
    seed: u64,
) -> Result<TraceDataset> {
    let mut dataset = load_dataset(manifest)?;
    if let Some(min) = min_duration {
        dataset.filter_min_duration(min);
    }
    if let Some(chunks) = split_chunks {
        dataset = dataset.split_long_traces(chunks, derive_seed(seed, "split"))?;
    }
    Ok(dataset)
}

fn extract_features_cmd(cmd: Command) -> Result<()> {
    let Command::ExtractFeatures {
        dataset,
        out,
        summary,
        min_duration,
        split_chunks,
        seed,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let ds = load_and_prepare(&dataset, min_duration, split_chunks, seed)?;
    let specs = default_specs(&ds);
    let vectors = extract_vectors(&ds, &specs)?;
    let mut file = fs::File::create(&out).with_context(|| format!("create {}", out.display()))?;
    write_feature_csv(&mut file, &specs, &vectors)?;
    println!("wrote {} feature rows to {}", vectors.len(), out.display());
    if let Some(summary) = summary {
        let summary = resolve_out(summary);
        let mut file =
            fs::File::create(&summary).with_context(|| format!("create {}", summary.display()))?;
        ds.write_summary_csv(&mut file)?;
        println!("wrote summary to {}", summary.display());
    }
    Ok(())
}

fn select_features_cmd(cmd: Command) -> Result<()> {
    let Command::SelectFeatures {
        dataset,
        out,
        seed,
        min_features,
        elimination_fraction,
        ig_threshold,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let ds = load_dataset(&dataset)?;
    let specs = default_specs(&ds);
    let matrix = plume_core::extract_matrix(&ds, &specs)?;
    let cfg = SelectionConfig {
        min_features,
        elimination_fraction,
        ig_threshold,
        seed: derive_seed(seed, "selection"),
        ..Default::default()
    };
    let report = select_critical_features(&matrix, &cfg)?;
    report.save_json(&out)?;
    println!(
        "selected {} of {} features over {} rounds -> {}",
        report.final_specs.len(),
        specs.len(),
        report.rounds.len(),
        out.display()
    );
    Ok(())
}

fn matrix_from_csv(features: &Path, select: Option<&Path>) -> Result<FeatureMatrix> {
    let (specs, ids, raw) = read_feature_csv(features)?;
    let mut matrix = FeatureMatrix::from_raw(specs, ids, raw)?;
    if let Some(report_path) = select {
        let report = SelectionReport::load_json(report_path)?;
        matrix = matrix.select_specs(&report.final_specs)?;
    }
    Ok(matrix)
}

fn cluster_cmd(cmd: Command) -> Result<()> {
    let Command::Cluster {
        features,
        k_min,
        k_max,
        seeds,
        seed,
        select,
        out,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let matrix = matrix_from_csv(&features, select.as_deref())?;
    let model = search_clustering(&matrix, (k_min, k_max), seeds, derive_seed(seed, "cluster"))?;
    model.save_json(&out)?;
    println!(
        "chose k = {} (silhouette {:.3}) -> {}",
        model.params.k,
        model.silhouette,
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_training(
    train_set: &TraceDataset,
    test_set: &TraceDataset,
    sampler: SamplerKind,
    clustering: Option<(&ClusterModel, &FeatureMatrix)>,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let inputs = clustering.map(|(model, matrix)| ClusteringInputs { model, matrix });
    let output = train(train_set, test_set, sampler, inputs, cfg)?;

    let metrics_path = out.join("metrics.csv");
    let mut file = fs::File::create(&metrics_path)?;
    write_metrics_csv(&mut file, &output.checkpoints)?;

    let weights_path = out.join("weights.json");
    let wf = weights_file(&output, sampler);
    let mut bytes = serde_json::to_vec_pretty(&wf)?;
    bytes.push(b'\n');
    fs::write(&weights_path, bytes)?;

    save_checkpoint(&output.final_net, &out.join("checkpoint.json"))?;

    let run_summary = serde_json::json!({
        "schema_version": 1,
        "sampler": sampler.name(),
        "total_env_steps": cfg.total_env_steps,
        "episodes": output.episodes,
        "categories": output.categories,
        "category_classes": output.category_classes,
        "per_category_episodes": output.per_category_episodes,
        "final_mean_return": output.checkpoints.last().map(|c| c.mean_return),
    });
    let mut bytes = serde_json::to_vec_pretty(&run_summary)?;
    bytes.push(b'\n');
    fs::write(out.join("run.json"), bytes)?;

    if let Some(last) = output.checkpoints.last() {
        println!(
            "finished {} episodes; final held-out mean return {:.3} -> {}",
            output.episodes,
            last.mean_return,
            out.display()
        );
    }
    Ok(())
}

fn train_cmd(cmd: Command) -> Result<()> {
    let Command::Train {
        train: train_path,
        test,
        sampler,
        cluster_model,
        features,
        select,
        steps,
        seed,
        out,
        eval_interval,
        eval_subset,
        two_class_threshold,
        per,
        dueling,
        double,
        hidden,
        lr,
        update_every,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let sampler: SamplerKind = sampler.parse()?;
    let train_set = load_dataset(&train_path)?;
    let test_set = load_dataset(&test)?;

    let clustering = if sampler.needs_clustering() {
        let model_path = cluster_model
            .ok_or_else(|| anyhow::anyhow!("--cluster-model is required for {}", sampler.name()))?;
        let features_path = features
            .ok_or_else(|| anyhow::anyhow!("--features is required for {}", sampler.name()))?;
        let model = ClusterModel::load_json(&model_path)?;
        let matrix = matrix_from_csv(&features_path, select.as_deref())?;
        Some((model, matrix))
    } else {
        None
    };

    let mut cfg = TrainConfig {
        total_env_steps: steps,
        eval_interval,
        eval_subset,
        two_class_threshold,
        seed: derive_seed(seed, "train"),
        agent: AgentConfig {
            per: per.then(PerConfig::default),
            dueling,
            double,
            seed: derive_seed(seed, "agent"),
            ..Default::default()
        },
        dynamic: DynamicConfig::default(),
        ..Default::default()
    };
    if let Some(hidden) = hidden {
        cfg.agent.hidden_sizes = hidden;
    }
    if let Some(lr) = lr {
        cfg.agent.lr = lr;
    }
    if let Some(update_every) = update_every {
        cfg.dynamic.update_every_episodes = update_every;
    }

    run_training(
        &train_set,
        &test_set,
        sampler,
        clustering.as_ref().map(|(m, x)| (m, x)),
        &cfg,
        &out,
    )
}

fn eval_cmd(cmd: Command) -> Result<()> {
    let Command::Eval {
        checkpoint,
        dataset,
        out,
        episode_log,
        seed: _,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let net = load_checkpoint(&checkpoint)?;
    let ds = load_dataset(&dataset)?;
    let abr = AbrConfig::default();
    let metrics = evaluate(&net, &ds, abr, None)?;

    let mut file = fs::File::create(&out).with_context(|| format!("create {}", out.display()))?;
    writeln!(file, "# schema=plume.eval.v1")?;
    let classes: Vec<&String> = metrics.per_class.keys().collect();
    let mut header = String::from("n_traces,mean_return");
    for c in &classes {
        header.push_str(&format!(",return_{c}"));
    }
    writeln!(file, "{header}")?;
    let mut line = format!("{},{}", metrics.n_traces, metrics.mean_return);
    for c in &classes {
        line.push_str(&format!(",{}", metrics.per_class[*c]));
    }
    writeln!(file, "{line}")?;
    println!(
        "mean return {:.3} over {} traces -> {}",
        metrics.mean_return,
        metrics.n_traces,
        out.display()
    );

    if let Some(log_path) = episode_log {
        let log_path = resolve_out(log_path);
        let mut log = fs::File::create(&log_path)?;
        for trace in &ds.traces {
            let mut env = AbrEnv::with_config(trace, derive_seed(0xE7A1, &trace.id), abr)?;
            while !env.is_done() {
                let action = greedy_action(&net, &env);
                let outcome = env.step(AbrAction(action))?;
                let mut record = serde_json::to_value(outcome)?;
                record["trace_id"] = serde_json::Value::String(trace.id.clone());
                writeln!(log, "{record}")?;
            }
        }
        println!("wrote episode log to {}", log_path.display());
    }
    Ok(())
}

fn greedy_action(net: &plume_core::nn::QNetwork, env: &AbrEnv) -> usize {
    let mut rng = plume_core::rng::rng_from_seed(0);
    plume_core::agent::act(&env.observation(), net, 0.0, &mut rng)
}

fn weights_dump_cmd(cmd: Command) -> Result<()> {
    let Command::WeightsDump {
        run,
        out,
        csv,
        seed: _,
    } = cmd
    else {
        unreachable!()
    };
    let path = if run.is_dir() {
        run.join("weights.json")
    } else {
        run
    };
    let text = fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
    let wf: WeightsFile = serde_json::from_str(&text)?;
    match out {
        Some(out) => {
            let out = resolve_out(out);
            fs::write(&out, &text)?;
            println!("wrote {}", out.display());
        }
        None => print!("{text}"),
    }
    if let Some(csv_path) = csv {
        let csv_path = resolve_out(csv_path);
        let mut file = fs::File::create(&csv_path)?;
        writeln!(file, "# schema=plume.weights.v1")?;
        writeln!(file, "version,step,category,class,weight")?;
        for entry in &wf.entries {
            for (i, w) in entry.weights.iter().enumerate() {
                writeln!(
                    file,
                    "{},{},{},{},{}",
                    entry.version, entry.step, wf.categories[i], wf.category_classes[i], w
                )?;
            }
        }
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn bench_cmd(cmd: Command) -> Result<()> {
    let Command::Bench {
        scenario,
        sampler,
        seed,
        out,
        steps,
        train_n,
        test_n,
        update_every,
    } = cmd
    else {
        unreachable!()
    };
    let out = resolve_out(out);
    let sampler: SamplerKind = sampler.parse()?;
    let (train_kind, test_kind) = scenario_kinds(scenario)?;
    fs::create_dir_all(&out)?;

    let train_set = build_dataset(train_kind, train_n, derive_seed(seed, "train-data"))?;
    let test_set = build_dataset(test_kind, test_n, derive_seed(seed, "test-data"))?;
    save_dataset(&train_set, &out.join("train"))?;
    save_dataset(&test_set, &out.join("test"))?;
    log::info!(
        "scenario {scenario}: train {} ({}), test {} ({})",
        train_kind,
        train_set.len(),
        test_kind,
        test_set.len()
    );

    let specs = default_specs(&train_set);
    let vectors = extract_vectors(&train_set, &specs)?;
    let mut file = fs::File::create(out.join("features.csv"))?;
    write_feature_csv(&mut file, &specs, &vectors)?;
    let matrix = matrix_from_vectors(&specs, &vectors)?;

    let clustering = if sampler.needs_clustering() {
        let cfg = SelectionConfig {
            seed: derive_seed(seed, "selection"),
            ..Default::default()
        };
        let report = select_critical_features(&matrix, &cfg)?;
        report.save_json(&out.join("selection.json"))?;
        let reduced = matrix.select_specs(&report.final_specs)?;
        let model = search_clustering(&reduced, (3, 7), 10, derive_seed(seed, "cluster"))?;
        model.save_json(&out.join("cluster_model.json"))?;
        log::info!(
            "clustered into k = {} (silhouette {:.3})",
            model.params.k,
            model.silhouette
        );
        Some((model, reduced))
    } else {
        None
    };

    let mut cfg = TrainConfig {
        total_env_steps: steps,
        eval_interval: (steps / 4).max(1),
        seed: derive_seed(seed, "train"),
        agent: AgentConfig {
            seed: derive_seed(seed, "agent"),
            ..Default::default()
        },
        ..Default::default()
    };
    if let Some(update_every) = update_every {
        cfg.dynamic.update_every_episodes = update_every;
    }
    run_training(
        &train_set,
        &test_set,
        sampler,
        clustering.as_ref().map(|(m, x)| (m, x)),
        &cfg,
        &out,
    )
}
