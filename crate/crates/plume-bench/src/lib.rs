//! Shared fixtures for the pipeline benchmarks.

use plume_core::clustering::ClusterModel;
use plume_core::features::{catalog, extract_matrix, FeatureMatrix};
use plume_core::trace::TraceDataset;
use plume_core::tracebench::{build_dataset, DatasetKind};

pub fn bench_dataset(n: usize) -> TraceDataset {
    build_dataset(DatasetKind::Balanced, n, 0xBE7C).expect("generate bench dataset")
}

pub fn bench_matrix(dataset: &TraceDataset) -> FeatureMatrix {
    extract_matrix(dataset, &catalog()).expect("extract bench matrix")
}

pub fn bench_model(matrix: &FeatureMatrix) -> ClusterModel {
    plume_core::clustering::search_clustering(matrix, (3, 5), 4, 0xBE7C).expect("fit bench model")
}
