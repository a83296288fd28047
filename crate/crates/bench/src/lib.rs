//! Shared builders for the benchmark targets.

use rrlp_core::nncore::{LayerDef, Network, Sample};
use rrlp_core::Tensor;

/// Small convnet matching the desk experiments' architecture.
pub fn lenet(seed: u64) -> Network {
    let defs = [
        LayerDef::Conv2d { out_channels: 6, kernel: 5, stride: 1 },
        LayerDef::Relu,
        LayerDef::MaxPool { size: 2 },
        LayerDef::Conv2d { out_channels: 16, kernel: 5, stride: 1 },
        LayerDef::Relu,
        LayerDef::MaxPool { size: 2 },
        LayerDef::Flatten,
        LayerDef::Dense { output: 120 },
        LayerDef::Relu,
        LayerDef::Dense { output: 84 },
        LayerDef::Relu,
    ];
    let mut net = Network::seeded(vec![1, 28, 28], &defs, seed).unwrap();
    net.add_head(0, 2).unwrap();
    net
}

/// Deterministic pseudo-image batch with alternating labels.
pub fn image_batch(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let values: Vec<f64> = (0..28 * 28)
                .map(|j| (((i * 131 + j * 17) % 251) as f64) / 251.0)
                .collect();
            Sample {
                input: Tensor::new(vec![1, 28, 28], values).unwrap(),
                label: i % 2,
            }
        })
        .collect()
}
