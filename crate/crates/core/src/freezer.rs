//! Relevance-guided pruning and cumulative neuron freezing. After a task
//! trains, the lowest-relevance free neurons are pruned greedily until the
//! masked validation accuracy would fall more than tau points below the full
//! model; whatever survives is frozen for good and forms that task's
//! subnetwork together with everything frozen before it.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{accuracy, Network, Sample, TaskId};

/// Identifies one freezable unit: `layer` indexes the network's freezable
/// layers in order (not raw backbone indices), `unit` the neuron/channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    /// Maximum allowed accuracy drop of the masked submodel, in percentage
    /// points relative to the freshly trained full model.
    pub tau: f64,
    /// Fraction of the remaining free neurons removed per trial step.
    pub chunk_fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            tau: 5.0,
            chunk_fraction: 0.05,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau >= 0.0) {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if !(self.chunk_fraction > 0.0 && self.chunk_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "chunk_fraction must lie in (0,1], got {}",
                self.chunk_fraction
            )));
        }
        Ok(())
    }
}

/// Cumulative freeze bookkeeping: every freezable unit is either free or
/// tagged with the task that froze it, plus the saturation history.
#[derive(Debug, Clone, PartialEq)]
pub struct FreezeState {
    /// Per freezable layer, per unit: None = free, Some(task) = frozen.
    tags: Vec<Vec<Option<TaskId>>>,
    /// (task, available fraction after that task froze), in freeze order.
    history: Vec<(TaskId, f64)>,
}

impl FreezeState {
    pub fn new(net: &Network) -> FreezeState {
        FreezeState {
            tags: net
                .freezable_widths()
                .iter()
                .map(|&w| vec![None; w])
                .collect(),
            history: Vec::new(),
        }
    }

    pub fn from_parts(tags: Vec<Vec<Option<TaskId>>>, history: Vec<(TaskId, f64)>) -> FreezeState {
        FreezeState { tags, history }
    }

    pub fn tags(&self) -> &[Vec<Option<TaskId>>] {
        &self.tags
    }

    pub fn history(&self) -> &[(TaskId, f64)] {
        &self.history
    }

    pub fn layer_count(&self) -> usize {
        self.tags.len()
    }

    pub fn is_free(&self, layer: usize, unit: usize) -> bool {
        self.tags[layer][unit].is_none()
    }

    pub fn frozen_tasks(&self) -> Vec<TaskId> {
        self.history.iter().map(|(t, _)| *t).collect()
    }

    pub fn check_matches(&self, widths: &[usize]) -> Result<()> {
        let got: Vec<usize> = self.tags.iter().map(|l| l.len()).collect();
        if got != widths {
            return Err(Error::dim(format!(
                "freeze state widths {:?} do not match network {:?}",
                got, widths
            )));
        }
        Ok(())
    }

    /// All currently free units in (layer, unit) order.
    pub fn free_neurons(&self) -> Vec<NeuronId> {
        let mut out = Vec::new();
        for (layer, tags) in self.tags.iter().enumerate() {
            for (unit, tag) in tags.iter().enumerate() {
                if tag.is_none() {
                    out.push(NeuronId { layer, unit });
                }
            }
        }
        out
    }
}

/// Evaluation-time keep mask for one task's cumulative subnetwork.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetworkMask {
    task: TaskId,
    /// Aligned with the network's freezable layers.
    keep: Vec<Vec<bool>>,
}

impl SubnetworkMask {
    pub fn from_parts(task: TaskId, keep: Vec<Vec<bool>>) -> SubnetworkMask {
        SubnetworkMask { task, keep }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn keep(&self, layer: usize) -> &[bool] {
        &self.keep[layer]
    }

    pub fn layers(&self) -> &[Vec<bool>] {
        &self.keep
    }

    pub fn check_widths(&self, widths: &[usize]) -> Result<()> {
        let got: Vec<usize> = self.keep.iter().map(|l| l.len()).collect();
        if got != widths {
            return Err(Error::dim(format!(
                "mask widths {:?} do not match network {:?}",
                got, widths
            )));
        }
        Ok(())
    }

    pub fn kept_count(&self) -> usize {
        self.keep
            .iter()
            .map(|l| l.iter().filter(|&&k| k).count())
            .sum()
    }
}

/// Outcome of one pruning pass; `kept` is the set of free neurons that
/// survived and will be frozen for this task.
#[derive(Debug, Clone, Serialize)]
pub struct PruneOutcome {
    pub kept: Vec<NeuronId>,
    pub submodel_acc: f64,
    pub full_acc: f64,
    /// Smallest mean normalized relevance among kept neurons (the implied
    /// threshold), if anything was kept.
    pub gamma: Option<f64>,
    pub eval_steps: usize,
}

fn mask_from_sets(
    freeze: &FreezeState,
    task: TaskId,
    kept: &BTreeSet<NeuronId>,
) -> SubnetworkMask {
    let keep = freeze
        .tags
        .iter()
        .enumerate()
        .map(|(layer, tags)| {
            tags.iter()
                .enumerate()
                .map(|(unit, tag)| tag.is_some() || kept.contains(&NeuronId { layer, unit }))
                .collect()
        })
        .collect();
    SubnetworkMask { task, keep }
}

/// Greedy relevance-ordered pruning. Free neurons are ranked by ascending
/// mean normalized relevance (ties by id) and removed in chunks of
/// `chunk_fraction` of the remaining free set; each trial re-measures masked
/// validation accuracy and the last step rolls back on violation. Previously
/// frozen neurons always stay in the mask.
pub fn prune_to_threshold(
    net: &Network,
    val: &[Sample],
    task: TaskId,
    freeze: &FreezeState,
    mean_norm: &[Vec<f64>],
    cfg: &PruneConfig,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::Input("prune_to_threshold with empty validation set".into()));
    }
    freeze.check_matches(&net.freezable_widths())?;
    let widths = net.freezable_widths();
    if mean_norm.len() != widths.len()
        || mean_norm.iter().zip(&widths).any(|(l, &w)| l.len() != w)
    {
        return Err(Error::dim("mean relevance does not cover all layers"));
    }

    // Ascending relevance, ties by (layer, unit) so runs reproduce exactly.
    let mut order = freeze.free_neurons();
    order.sort_by(|a, b| {
        let ra = mean_norm[a.layer][a.unit];
        let rb = mean_norm[b.layer][b.unit];
        ra.partial_cmp(&rb).unwrap().then(a.cmp(b))
    });

    let mut kept: BTreeSet<NeuronId> = order.iter().copied().collect();
    let full_acc = accuracy(net, val, task, Some(&mask_from_sets(freeze, task, &kept)))?;
    let bound = full_acc - cfg.tau;

    let mut submodel_acc = full_acc;
    let mut eval_steps = 0usize;
    let mut cursor = 0usize;
    while cursor < order.len() {
        let remaining = order.len() - cursor;
        let chunk = ((cfg.chunk_fraction * remaining as f64).round() as usize)
            .clamp(1, remaining);
        let trial: Vec<NeuronId> = order[cursor..cursor + chunk].to_vec();
        for n in &trial {
            kept.remove(n);
        }
        let acc = accuracy(net, val, task, Some(&mask_from_sets(freeze, task, &kept)))?;
        eval_steps += 1;
        if acc + 1e-9 >= bound {
            submodel_acc = acc;
            cursor += chunk;
        } else {
            for n in trial {
                kept.insert(n);
            }
            break;
        }
    }

    if submodel_acc + 1e-9 < bound {
        return Err(Error::Consistency(format!(
            "pruning bound unreachable: full {} vs submodel {} with tau {}",
            full_acc, submodel_acc, cfg.tau
        )));
    }

    let kept: Vec<NeuronId> = kept.into_iter().collect();
    let gamma = kept
        .iter()
        .map(|n| mean_norm[n.layer][n.unit])
        .min_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(PruneOutcome {
        kept,
        submodel_acc,
        full_acc,
        gamma,
        eval_steps,
    })
}

/// Freeze the kept neurons under this task's tag. Already-frozen neurons in
/// `kept` are ignored; refreezing a task id is a state error.
pub fn freeze_task(freeze: &FreezeState, kept: &[NeuronId], task: TaskId) -> Result<FreezeState> {
    if freeze.history.iter().any(|(t, _)| *t == task) {
        return Err(Error::Input(format!("task {task} was already frozen")));
    }
    let mut next = freeze.clone();
    for n in kept {
        if n.layer >= next.tags.len() || n.unit >= next.tags[n.layer].len() {
            return Err(Error::dim(format!(
                "neuron {:?} outside freeze state layout",
                n
            )));
        }
        let tag = &mut next.tags[n.layer][n.unit];
        if tag.is_none() {
            *tag = Some(task);
        }
    }
    let fraction = available_fraction(&next);
    next.history.push((task, fraction));
    Ok(next)
}

/// Keep mask of everything frozen at or before `task` (cumulative
/// subnetwork). The task must have gone through freeze_task.
pub fn submodel_mask(freeze: &FreezeState, task: TaskId) -> Result<SubnetworkMask> {
    if !freeze.history.iter().any(|(t, _)| *t == task) {
        return Err(Error::MissingTask(task));
    }
    let keep = freeze
        .tags
        .iter()
        .map(|tags| {
            tags.iter()
                .map(|tag| matches!(tag, Some(t) if *t <= task))
                .collect()
        })
        .collect();
    Ok(SubnetworkMask { task, keep })
}

/// Free / total over all freezable layers; 1.0 for a fresh state.
pub fn available_fraction(freeze: &FreezeState) -> f64 {
    let total: usize = freeze.tags.iter().map(|l| l.len()).sum();
    if total == 0 {
        return 1.0;
    }
    let free: usize = freeze
        .tags
        .iter()
        .map(|l| l.iter().filter(|t| t.is_none()).count())
        .sum();
    free as f64 / total as f64
}
