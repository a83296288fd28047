//! Shared builders for integration tests.
#![allow(dead_code)]

use rrlp_core::dataio::{BlobSpec, DatasetSource};
use rrlp_core::lrp::LrpConfig;
use rrlp_core::nncore::LayerDef;
use rrlp_core::orchestrator::{
    ExperimentConfig, MemoryConfig, Method, NetworkSpec, PruneGrid, TrainGrid,
};
use rrlp_core::taskinfer::ForestConfig;

/// Well-separated cluster centers on a circle of radius 4.
pub fn circle_centers(classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / classes as f64;
            vec![4.0 * theta.cos(), 4.0 * theta.sin()]
        })
        .collect()
}

/// Small separable-blob experiment: `tasks` tasks of two classes each on a
/// dense ReLU network.
pub fn blob_config(tasks: usize, method: Method) -> ExperimentConfig {
    let classes = tasks * 2;
    ExperimentConfig {
        dataset: DatasetSource::SyntheticBlobs(BlobSpec {
            classes,
            dims: 2,
            train_per_class: 100,
            test_per_class: 30,
            spread: 0.35,
            seed: 9,
            centers: Some(circle_centers(classes)),
            center_box: 5.0,
        }),
        network: NetworkSpec {
            input_shape: vec![2],
            layers: vec![
                LayerDef::Dense { output: 24 },
                LayerDef::Relu,
                LayerDef::Dense { output: 24 },
                LayerDef::Relu,
            ],
        },
        schedule: vec![2; tasks],
        class_order: None,
        method,
        train: TrainGrid {
            learning_rates: vec![0.1],
            epochs: 20,
            batch_size: 16,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_plateau_patience: 5,
            early_stop_patience: None,
        },
        prune: PruneGrid { taus: vec![5.0], chunk_fraction: 0.1 },
        memory: MemoryConfig {
            n_f: 4,
            exemplars_per_class: 5,
            reference: [100, 100, 100],
            herd_pool_per_class: None,
        },
        forest: ForestConfig { n_trees: 50, ..ForestConfig::default() },
        lrp: LrpConfig::default(),
        seeds: vec![1],
        val_fraction: 0.15,
        relevance_sample_cap: None,
        progress: false,
    }
}
