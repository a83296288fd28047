//! Dataset plumbing: IDX parsing, synthetic blob generation, class-order
//! task splitting with label remapping, and input normalization. The engine
//! never downloads anything; dataset files are supplied by the user.

mod checkpoint;
mod idx;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use idx::{load_idx, LabeledDataset, IMAGES_MAGIC, LABELS_MAGIC};

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{Sample, TaskId};
use crate::rng;
use crate::tensor::Tensor;

/// Environment variable naming the dataset root; relative IDX paths resolve
/// against it.
pub const DATA_DIR_ENV: &str = "RRLP_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    IdxFiles {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        normalization: NormalizationMode,
        /// Optional per-class caps applied by the orchestrator (seeded), to
        /// keep desk runs inside their runtime budgets.
        #[serde(default)]
        max_train_per_class: Option<usize>,
        #[serde(default)]
        max_test_per_class: Option<usize>,
    },
    SyntheticBlobs(BlobSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub classes: usize,
    pub dims: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub seed: u64,
    /// Cluster centers; drawn uniformly from [-center_box, center_box]^dims
    /// when absent.
    pub centers: Option<Vec<Vec<f64>>>,
    pub center_box: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 2,
            dims: 2,
            train_per_class: 100,
            test_per_class: 50,
            spread: 0.5,
            seed: 0,
            centers: None,
            center_box: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NormalizationMode {
    None,
    /// Per-channel mean/std from the first task's training data, reused for
    /// every later task (later tasks must not leak into earlier checkpoints).
    #[default]
    FirstTask,
    Explicit {
        mean: Vec<f64>,
        std: Vec<f64>,
    },
}

/// Fitted per-channel affine normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [c, h, w] => (c, h * w),
        _ => (1, shape.iter().product()),
    }
}

/// Per-channel mean and standard deviation over a sample set.
pub fn compute_normalization(inputs: &[Tensor]) -> Result<Normalization> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Input("normalization over empty set".into()))?;
    let (channels, plane) = channel_layout(first.shape());
    let mut mean = vec![0.0; channels];
    let mut sq = vec![0.0; channels];
    // Values seen per channel: one plane per sample.
    let count = (inputs.len() * plane) as f64;
    for t in inputs {
        for c in 0..channels {
            for v in &t.values()[c * plane..(c + 1) * plane] {
                mean[c] += v;
                sq[c] += v * v;
            }
        }
    }
    let mut std = vec![0.0; channels];
    for c in 0..channels {
        mean[c] /= count;
        let var = sq[c] / count - mean[c] * mean[c];
        std[c] = var.max(0.0).sqrt().max(1e-12);
    }
    Ok(Normalization { mean, std })
}

pub fn apply_normalization(norm: &Normalization, inputs: &mut [Tensor]) {
    for t in inputs {
        let (channels, plane) = channel_layout(&t.shape().to_vec());
        for c in 0..channels.min(norm.mean.len()) {
            let (m, s) = (norm.mean[c], norm.std[c]);
            for v in &mut t.values_mut()[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
}

/// Seeded Gaussian clusters, one per class, rank-1 inputs. Labels come out
/// grouped by class in center order.
pub fn make_blobs(spec: &BlobSpec, per_class: usize, stream: u64) -> Result<LabeledDataset> {
    if spec.classes < 2 {
        return Err(Error::Config("blobs need >= 2 classes".into()));
    }
    if spec.dims == 0 {
        return Err(Error::Config("blobs need >= 1 dimension".into()));
    }
    let centers = match &spec.centers {
        Some(c) => {
            if c.len() != spec.classes || c.iter().any(|v| v.len() != spec.dims) {
                return Err(Error::Config("blob centers do not match classes/dims".into()));
            }
            c.clone()
        }
        None => {
            let mut rng = rng::rng_from(spec.seed, rng::tagged(rng::stream::BLOBS, &[0]));
            (0..spec.classes)
                .map(|_| {
                    (0..spec.dims)
                        .map(|_| rng.random_range(-spec.center_box..spec.center_box))
                        .collect()
                })
                .collect()
        }
    };
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = rng::rng_from(spec.seed, rng::tagged(rng::stream::BLOBS, &[1, stream]));
    let mut inputs = Vec::with_capacity(spec.classes * per_class);
    let mut labels = Vec::with_capacity(spec.classes * per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|c| c + spec.spread * normal.sample(&mut rng))
                .collect();
            inputs.push(Tensor::from_vec(point)?);
            labels.push(class);
        }
    }
    Ok(LabeledDataset {
        inputs,
        labels,
        n_classes: spec.classes,
        input_shape: vec![spec.dims],
    })
}

/// Resolve a source into (train, test) sets. IDX paths resolve relative to
/// RRLP_DATA_DIR when set.
pub fn resolve_source(source: &DatasetSource) -> Result<(LabeledDataset, LabeledDataset)> {
    match source {
        DatasetSource::IdxFiles {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } => {
            let train = load_idx(&resolve_path(train_images), &resolve_path(train_labels))?;
            let test = load_idx(&resolve_path(test_images), &resolve_path(test_labels))?;
            if train.input_shape != test.input_shape {
                return Err(Error::Consistency(format!(
                    "train shape {:?} vs test shape {:?}",
                    train.input_shape, test.input_shape
                )));
            }
            Ok((train, test))
        }
        DatasetSource::SyntheticBlobs(spec) => {
            // Pin the centers so both splits share them, then draw the two
            // splits from independent streams.
            let mut spec = spec.clone();
            if spec.centers.is_none() {
                let mut rng = rng::rng_from(spec.seed, rng::tagged(rng::stream::BLOBS, &[0]));
                let centers = (0..spec.classes)
                    .map(|_| {
                        (0..spec.dims)
                            .map(|_| rng.random_range(-spec.center_box..spec.center_box))
                            .collect()
                    })
                    .collect();
                spec.centers = Some(centers);
            }
            let train = make_blobs(&spec, spec.train_per_class, 0)?;
            let test = make_blobs(&spec, spec.test_per_class, 1)?;
            Ok((train, test))
        }
    }
}

pub fn resolve_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

/// Ordered class groups defining the task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub groups: Vec<Vec<usize>>,
}

impl TaskSplit {
    /// Consecutive chunks of `order` with the given sizes.
    pub fn from_schedule(order: &[usize], sizes: &[usize]) -> Result<TaskSplit> {
        let total: usize = sizes.iter().sum();
        if total != order.len() {
            return Err(Error::Config(format!(
                "schedule covers {} classes, order lists {}",
                total,
                order.len()
            )));
        }
        let mut groups = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &sz in sizes {
            if sz == 0 {
                return Err(Error::Config("schedule entries must be >= 1".into()));
            }
            groups.push(order[start..start + sz].to_vec());
            start += sz;
        }
        Ok(TaskSplit { groups })
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let mut seen = vec![false; n_classes];
        for g in &self.groups {
            for &c in g {
                if c >= n_classes {
                    return Err(Error::Config(format!(
                        "class {c} outside dataset range 0..{n_classes}"
                    )));
                }
                if seen[c] {
                    return Err(Error::Config(format!("class {c} appears twice in schedule")));
                }
                seen[c] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Config("schedule does not cover every class".into()));
        }
        Ok(())
    }
}

/// One task's data with task-local labels; `classes[local] = global`.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub task: TaskId,
    pub classes: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl TaskData {
    pub fn local_label(&self, global: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == global)
    }
}

/// Partition train/test by the split's class groups, remapping labels to
/// [0, group size).
pub fn split_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    split: &TaskSplit,
) -> Result<Vec<TaskData>> {
    let n_classes = train.n_classes.max(test.n_classes);
    split.validate(n_classes)?;
    let mut out = Vec::with_capacity(split.groups.len());
    for (task, group) in split.groups.iter().enumerate() {
        let collect = |ds: &LabeledDataset| -> Vec<Sample> {
            ds.inputs
                .iter()
                .zip(&ds.labels)
                .filter_map(|(x, &l)| {
                    group.iter().position(|&c| c == l).map(|local| Sample {
                        input: x.clone(),
                        label: local,
                    })
                })
                .collect()
        };
        out.push(TaskData {
            task,
            classes: group.clone(),
            train: collect(train),
            test: collect(test),
        });
    }
    Ok(out)
}
