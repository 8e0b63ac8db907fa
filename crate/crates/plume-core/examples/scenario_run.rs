//! Run one benchmark scenario across samplers and seeds, printing held-out
//! returns and weight trajectories. Handy for eyeballing training behavior:
//!
//! cargo run --release -p plume-core --example scenario_run -- 1 60000 2

use std::collections::BTreeMap;

use plume_core::agent::{train, AgentConfig, ClusteringInputs, SamplerKind, TrainConfig};
use plume_core::clustering::search_clustering;
use plume_core::features::{catalog, extract_matrix};
use plume_core::prioritization::DynamicConfig;
use plume_core::rng::derive_seed;
use plume_core::selection::{select_critical_features, SelectionConfig};
use plume_core::trace::ReturnSpec;
use plume_core::tracebench::{build_dataset, scenario_kinds};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1);
    let steps: u64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60_000);
    let seeds: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2);

    let (train_kind, test_kind) = scenario_kinds(scenario).unwrap();
    let train_set = build_dataset(
        train_kind,
        400,
        derive_seed(1000 + scenario as u64, "train-data"),
    )
    .unwrap();
    let test_set = build_dataset(
        test_kind,
        200,
        derive_seed(1000 + scenario as u64, "test-data"),
    )
    .unwrap();

    let t0 = std::time::Instant::now();
    let matrix = extract_matrix(&train_set, &catalog()).unwrap();
    let report = select_critical_features(
        &matrix,
        &SelectionConfig {
            seed: 7,
            ..Default::default()
        },
    )
    .unwrap();
    let reduced = matrix.select_specs(&report.final_specs).unwrap();
    let model = search_clustering(&reduced, (3, 7), 10, 11).unwrap();
    println!(
        "scenario {scenario}: selection kept {:?}; k = {} silhouette {:.3} ({:?})",
        report
            .final_specs
            .iter()
            .map(|s| s.label())
            .collect::<Vec<_>>(),
        model.params.k,
        model.silhouette,
        t0.elapsed()
    );

    for sampler in [
        SamplerKind::Random,
        SamplerKind::PlumeStatic,
        SamplerKind::PlumeDynamic,
    ] {
        for seed in 0..seeds {
            let cfg = TrainConfig {
                agent: AgentConfig {
                    hidden_sizes: vec![128, 128],
                    lr: 3e-4,
                    eps_anneal_steps: 8_000,
                    target_sync_interval: 1_000,
                    warmup_steps: 1_000,
                    seed: derive_seed(seed, "agent"),
                    ..Default::default()
                },
                total_env_steps: steps,
                eval_interval: 6_000,
                eval_subset: None,
                dynamic: DynamicConfig {
                    update_every_episodes: 8,
                    train_steps_per_episode: 16,
                    window_capacity: 32,
                    predictor: plume_core::prioritization::PredictorConfig {
                        buffer_capacity: 64,
                        ..Default::default()
                    },
                    ..Default::default()
                },
                return_spec: ReturnSpec {
                    gamma: 0.975,
                    normalize: true,
                    ..Default::default()
                },
                seed: derive_seed(seed, "run"),
                ..Default::default()
            };
            let t = std::time::Instant::now();
            let inputs = sampler.needs_clustering().then_some(ClusteringInputs {
                model: &model,
                matrix: &reduced,
            });
            let out = train(&train_set, &test_set, sampler, inputs, &cfg).unwrap();
            let trajectory: Vec<String> = out
                .checkpoints
                .iter()
                .map(|c| {
                    let slow: f64 = c
                        .per_class
                        .iter()
                        .filter(|(k, _)| k.starts_with("slow"))
                        .map(|(_, v)| v)
                        .sum::<f64>()
                        / 2.0;
                    format!("{}:{:.0}/{:.0}", c.step / 1000, c.mean_return, slow)
                })
                .collect();
            let last = out.checkpoints.last().unwrap();
            let slow: BTreeMap<&String, &f64> = last
                .per_class
                .iter()
                .filter(|(k, _)| k.starts_with("slow"))
                .collect();
            println!(
                "  {:13} seed {seed}: mean {:8.2} slow {:?} episodes {} cat_eps {:?} ({:.1?})",
                sampler.name(),
                last.mean_return,
                slow,
                out.episodes,
                out.per_category_episodes,
                t.elapsed()
            );
            println!(
                "      trajectory (kstep:mean/slow): {}",
                trajectory.join("  ")
            );
            if sampler == SamplerKind::PlumeDynamic {
                let n = out.weights_log.len();
                // Time-average over published (non-initial) tables.
                let published: Vec<&Vec<f64>> = out
                    .weights_log
                    .iter()
                    .filter(|e| e.version > 0)
                    .map(|e| &e.weights)
                    .collect();
                let avg: Vec<f64> = (0..out.categories.len())
                    .map(|i| published.iter().map(|w| w[i]).sum::<f64>() / published.len() as f64)
                    .collect();
                let labeled: Vec<String> = out
                    .category_classes
                    .iter()
                    .zip(&avg)
                    .map(|(c, w)| format!("{c}={w:.2}"))
                    .collect();
                println!("      weight entries {n}, time-averaged {labeled:?}");
            }
        }
    }
}
