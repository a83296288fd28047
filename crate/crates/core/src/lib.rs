//! Continual learning with relevance-guided neuron freezing.
//!
//! A small CPU-only stack for class-incremental experiments: a dense/conv
//! network with one classification head per task, layerwise relevance
//! propagation to score neurons, greedy pruning that freezes each task's
//! critical subnetwork, an exemplar memory that stores compact relevance
//! signatures instead of raw data, and a random-forest classifier chain that
//! infers which task a test sample belongs to. The `orchestrator` module
//! ties those pieces into full experiment protocols with finetuning and
//! joint-training baselines.

pub mod dataio;
pub mod error;
pub mod freezer;
pub mod lrp;
pub mod memory;
pub mod metrics;
pub mod nncore;
pub mod orchestrator;
pub mod rng;
pub mod taskinfer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
