//! Task inference: one binary ID-vs-OOD forest per task, chained so each
//! stage also sees the hard decisions of the stages before it. Task
//! probabilities combine stage outputs as p_n = P_n * prod_{i<n} (1 - P_i).

mod forest;

pub use forest::{fit_forest, gini, DecisionTree, ForestConfig, RandomForest, TreeNode};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::freezer::FreezeState;
use crate::lrp::LrpConfig;
use crate::memory::{relevance_signature, FeatureSelection, RelevanceDataset};
use crate::nncore::{Network, TaskId};
use crate::rng;
use crate::tensor::Tensor;

/// One sample's selected-feature relevances through one task's subnetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceSignature {
    pub task: TaskId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStage {
    pub task: TaskId,
    pub forest: RandomForest,
}

/// Ordered per-task stages; stage at position i consumes n_f signature
/// features plus i earlier hard decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierChain {
    pub n_f: usize,
    pub stages: Vec<ChainStage>,
}

impl ClassifierChain {
    pub fn stage_input_width(&self, position: usize) -> usize {
        self.n_f + position
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.stages.iter().map(|s| s.task).collect()
    }
}

/// Raw stage outputs, the first-accept combination, and the leftover mass.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskProbabilities {
    /// P_i: each stage's raw ID probability given its signature and earlier
    /// decisions.
    pub stage: Vec<f64>,
    /// p_n = P_n * prod_{i<n} (1 - P_i).
    pub p: Vec<f64>,
    /// prod_i (1 - P_i): mass no stage claimed.
    pub residual: f64,
}

/// Hard chain decision fed to later stages. Thresholding at 0.5 is invariant
/// under any monotone rescaling of the probability that fixes 0.5.
pub fn hard_decision(p: f64) -> bool {
    p >= 0.5
}

/// Fit the chain on the relevance datasets, in task order. Stage i's rows
/// are its dataset's rows labeled ID (source == own task) or OOD, augmented
/// with earlier stages' decisions computed on the matching rows of their own
/// datasets (rows align because every dataset stores the same exemplars of a
/// given source task in the same order).
pub fn chain_fit(datasets: &[RelevanceDataset], cfg: &ForestConfig) -> Result<ClassifierChain> {
    if datasets.is_empty() {
        return Err(Error::Input("chain_fit without datasets".into()));
    }
    let n_f = datasets[0].n_f;
    for w in datasets.windows(2) {
        if w[1].task <= w[0].task {
            return Err(Error::Input("datasets must arrive in ascending task order".into()));
        }
    }
    for ds in datasets {
        if ds.n_f != n_f {
            return Err(Error::dim(format!(
                "dataset {} stores {} features, chain expects {}",
                ds.task, ds.n_f, n_f
            )));
        }
        if !ds.rows.iter().any(|r| r.source_task == ds.task) {
            return Err(Error::Input(format!(
                "stage for task {} has no in-distribution rows",
                ds.task
            )));
        }
    }
    let last = datasets.len() - 1;
    for (i, ds) in datasets.iter().enumerate() {
        if i < last && !ds.rows.iter().any(|r| r.source_task != ds.task) {
            return Err(Error::Input(format!(
                "stage for task {} has no out-of-distribution rows",
                ds.task
            )));
        }
    }

    // (source task, ordinal) -> row index, per dataset, for row alignment.
    let indices: Vec<BTreeMap<(TaskId, usize), usize>> = datasets
        .iter()
        .map(|ds| {
            let mut seen: BTreeMap<TaskId, usize> = BTreeMap::new();
            let mut map = BTreeMap::new();
            for (ri, row) in ds.rows.iter().enumerate() {
                let ord = seen.entry(row.source_task).or_insert(0);
                map.insert((row.source_task, *ord), ri);
                *ord += 1;
            }
            map
        })
        .collect();

    let mut stages: Vec<ChainStage> = Vec::with_capacity(datasets.len());
    for (pos, ds) in datasets.iter().enumerate() {
        let mut x: Vec<Vec<f64>> = Vec::with_capacity(ds.rows.len());
        let mut y: Vec<usize> = Vec::with_capacity(ds.rows.len());
        let mut seen: BTreeMap<TaskId, usize> = BTreeMap::new();
        for row in &ds.rows {
            let ord = seen.entry(row.source_task).or_insert(0);
            let key = (row.source_task, *ord);
            *ord += 1;

            let mut feats = row.features.clone();
            // Earlier stages' hard decisions on this same exemplar.
            for (j, stage) in stages.iter().enumerate() {
                let row_j = indices[j].get(&key).ok_or_else(|| {
                    Error::Consistency(format!(
                        "dataset {} is missing row {:?} needed by stage {}",
                        datasets[j].task, key, ds.task
                    ))
                })?;
                let mut fj = datasets[j].rows[*row_j].features.clone();
                fj.extend(feats[n_f..n_f + j].iter().copied());
                let p = stage.forest.predict_proba(&fj)?[1];
                feats.push(if hard_decision(p) { 1.0 } else { 0.0 });
            }
            x.push(feats);
            y.push(usize::from(row.source_task == ds.task));
        }
        let stage_cfg = ForestConfig {
            seed: rng::tagged(cfg.seed, &[pos as u64]),
            ..*cfg
        };
        let forest = fit_forest(&x, &y, &stage_cfg)?;
        stages.push(ChainStage { task: ds.task, forest });
    }
    Ok(ClassifierChain { n_f, stages })
}

/// Run the chain over one sample's per-task signatures.
pub fn chain_task_probabilities(
    chain: &ClassifierChain,
    signatures: &[RelevanceSignature],
) -> Result<TaskProbabilities> {
    if signatures.len() != chain.stages.len() {
        return Err(Error::dim(format!(
            "{} signatures for {} stages",
            signatures.len(),
            chain.stages.len()
        )));
    }
    let mut stage_p = Vec::with_capacity(chain.stages.len());
    let mut decisions: Vec<f64> = Vec::new();
    for (stage, sig) in chain.stages.iter().zip(signatures) {
        if sig.task != stage.task {
            return Err(Error::Input(format!(
                "signature for task {} fed to stage {}",
                sig.task, stage.task
            )));
        }
        if sig.features.len() != chain.n_f {
            return Err(Error::dim(format!(
                "signature length {} vs n_f {}",
                sig.features.len(),
                chain.n_f
            )));
        }
        let mut feats = sig.features.clone();
        feats.extend(decisions.iter().copied());
        let p = stage.forest.predict_proba(&feats)?[1];
        stage_p.push(p);
        decisions.push(if hard_decision(p) { 1.0 } else { 0.0 });
    }
    Ok(combine_stage_probabilities(&stage_p))
}

/// First-accept combination of raw stage probabilities: stage n's mass is
/// P_n times the probability every earlier stage declined. Exposed
/// separately so the telescoping identity can be checked on raw vectors.
pub fn combine_stage_probabilities(stage_p: &[f64]) -> TaskProbabilities {
    let mut p = Vec::with_capacity(stage_p.len());
    let mut carry = 1.0;
    for &pi in stage_p {
        p.push(pi * carry);
        carry *= 1.0 - pi;
    }
    TaskProbabilities {
        stage: stage_p.to_vec(),
        p,
        residual: carry,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub task: TaskId,
    /// Task-local class under the chosen task's mask and head.
    pub class: usize,
    pub probabilities: TaskProbabilities,
}

/// Task-agnostic prediction: signatures through every frozen subnetwork,
/// chain probabilities, argmax task (ties to the lowest id), then the class
/// from that task's masked head.
pub fn predict(
    net: &Network,
    freeze: &FreezeState,
    chain: &ClassifierChain,
    selections: &[FeatureSelection],
    x: &Tensor,
    cfg: &LrpConfig,
) -> Result<Prediction> {
    let mut signatures = Vec::with_capacity(chain.stages.len());
    let mut classes = Vec::with_capacity(chain.stages.len());
    for stage in &chain.stages {
        let selection = selections
            .iter()
            .find(|s| s.task == stage.task)
            .ok_or(Error::MissingTask(stage.task))?;
        let (features, class) =
            relevance_signature(net, freeze, stage.task, selection, x, cfg)?;
        signatures.push(RelevanceSignature { task: stage.task, features });
        classes.push(class);
    }
    let probabilities = chain_task_probabilities(chain, &signatures)?;

    let mut best = 0usize;
    for (i, v) in probabilities.p.iter().enumerate().skip(1) {
        if *v > probabilities.p[best] {
            best = i;
        }
    }
    Ok(Prediction {
        task: chain.stages[best].task,
        class: classes[best],
        probabilities,
    })
}
