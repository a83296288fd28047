//! End-to-end continual-learning protocols. One run walks the task sequence
//! with a fixed (seed, learning rate, pruning budget) cell: train the new
//! head, rank neurons by relevance, prune and freeze, herd exemplars into
//! relevance rows, refit the task-inference chain, then score every task seen
//! so far. Finetuning and joint-training baselines share the same loop with
//! the relevance machinery switched off. A grid layer repeats runs over
//! seeds x learning rates x budgets and picks each seed's best cell.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    apply_normalization, compute_normalization, resolve_source, split_tasks, DatasetSource,
    LabeledDataset, Normalization, NormalizationMode, TaskData, TaskSplit,
};
use crate::dataio::{save_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::freezer::{
    available_fraction, freeze_task, prune_to_threshold, submodel_mask, FreezeState, PruneConfig,
    PruneOutcome,
};
use crate::lrp::{mean_relevance, LrpConfig};
use crate::memory::{
    build_relevance_rows, check_budget, refresh_old_tasks, relevance_signature,
    representatives_needed, select_features_mean, BudgetReport, ExemplarStore, FeatureSelection,
    MemoryBudget, RelevanceDataset,
};
use crate::metrics::{average_accuracy, forgetting, AccuracyMatrix, MetricsTable};
use crate::nncore::{
    accuracy, argmax, train_joint, train_task, LayerDef, Network, Sample, TaskId, TrainConfig,
    TrainData, TrainStats,
};
use crate::rng::{self, stream};
use crate::taskinfer::{chain_fit, predict, ClassifierChain, ForestConfig};

/// Architecture description: input geometry plus the backbone layer stack.
/// Heads are added per task at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Relevance-guided freezing with exemplar memory and task inference.
    Rerelrp,
    /// Train each task on top of the previous weights; no protection at all.
    Finetune,
    /// Retrain on the union of every task seen so far (upper bound).
    Joint,
}

/// Training hyperparameters; `learning_rates` spans the search grid, the
/// rest is shared by every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainGrid {
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub lr_decay_factor: f64,
    pub lr_plateau_patience: usize,
    pub early_stop_patience: Option<usize>,
}

impl Default for TrainGrid {
    fn default() -> Self {
        TrainGrid {
            learning_rates: vec![0.1],
            epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            lr_decay_factor: 0.1,
            lr_plateau_patience: 5,
            early_stop_patience: None,
        }
    }
}

/// Pruning budgets to search over (accuracy-drop tolerances, in points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneGrid {
    pub taus: Vec<f64>,
    pub chunk_fraction: f64,
}

impl Default for PruneGrid {
    fn default() -> Self {
        PruneGrid {
            taus: vec![5.0],
            chunk_fraction: 0.05,
        }
    }
}

/// Exemplar memory sizing. `reference` is the storage budget the relevance
/// memory must stay under, expressed as the product of its three factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    /// Signature width: top relevant neurons kept per task.
    pub n_f: usize,
    /// Exemplars herded per class.
    pub exemplars_per_class: usize,
    /// Budget reference product, e.g. (input dim, classes, images per class).
    pub reference: [u64; 3],
    /// Cap on the per-class candidate pool fed to herding (seeded subsample).
    #[serde(default)]
    pub herd_pool_per_class: Option<usize>,
}

/// Everything one experiment needs; serializable so runs can be launched
/// from a JSON file and echoed into the output manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub network: NetworkSpec,
    /// Classes per task, in task order.
    pub schedule: Vec<usize>,
    /// Global class ids in presentation order; identity when absent.
    #[serde(default)]
    pub class_order: Option<Vec<usize>>,
    pub method: Method,
    #[serde(default)]
    pub train: TrainGrid,
    #[serde(default)]
    pub prune: PruneGrid,
    pub memory: MemoryConfig,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub lrp: LrpConfig,
    pub seeds: Vec<u64>,
    /// Fraction of each task's training data held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Cap on the sample count used for mean relevance (seeded subsample).
    #[serde(default)]
    pub relevance_sample_cap: Option<usize>,
    /// Emit RRLP| progress lines on stderr.
    #[serde(default)]
    pub progress: bool,
}

fn default_val_fraction() -> f64 {
    0.1
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("schedule: no tasks listed".into()));
        }
        if self.schedule.iter().any(|&c| c < 2) {
            return Err(Error::Config(
                "schedule: every task needs at least two classes".into(),
            ));
        }
        if self.network.layers.is_empty() {
            return Err(Error::Config("network.layers: no layers listed".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: none listed".into()));
        }
        if self.train.learning_rates.is_empty() {
            return Err(Error::Config("train.learning_rates: none listed".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "val_fraction: {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if self.method == Method::Rerelrp {
            if self.val_fraction <= 0.0 {
                return Err(Error::Config(
                    "val_fraction: pruning needs a validation split, set it above 0".into(),
                ));
            }
            if self.prune.taus.is_empty() {
                return Err(Error::Config("prune.taus: none listed".into()));
            }
            if self.memory.n_f == 0 {
                return Err(Error::Config("memory.n_f: must be positive".into()));
            }
            if self.memory.exemplars_per_class == 0 {
                return Err(Error::Config(
                    "memory.exemplars_per_class: must be positive".into(),
                ));
            }
        }
        self.lrp.validate()?;
        self.forest.validate()?;
        Ok(())
    }

    fn train_config(&self, learning_rate: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            momentum: self.train.momentum,
            lr_decay_factor: self.train.lr_decay_factor,
            lr_plateau_patience: self.train.lr_plateau_patience,
            early_stop_patience: self.train.early_stop_patience,
            seed,
        }
    }
}

/// One grid cell: the seed plus the hyperparameters under search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellChoice {
    pub seed: u64,
    pub learning_rate: f64,
    /// Pruning budget; required by the relevance method, ignored by baselines.
    pub tau: Option<f64>,
}

/// Everything recorded about one task step.
#[derive(Debug, Clone, Serialize)]
pub struct TaskOutcome {
    pub task: TaskId,
    pub train: TrainStats,
    pub prune: Option<PruneOutcome>,
    pub budget: Option<BudgetReport>,
    /// Accuracy on tasks 0..=task with the right mask and head.
    pub taw_row: Vec<f64>,
    /// Accuracy with the task inferred by the chain (baselines: by the
    /// highest logit across every head).
    pub tag_row: Vec<f64>,
    pub available: f64,
    pub seconds: f64,
}

/// Final artifact of a run.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub seed: u64,
    pub learning_rate: f64,
    pub tau: Option<f64>,
    pub metrics: MetricsTable,
    pub final_taw: f64,
    pub final_tag: f64,
    pub forgetting_taw: Option<f64>,
    pub forgetting_tag: Option<f64>,
    pub budget: Option<BudgetReport>,
    pub tasks: Vec<TaskOutcome>,
    pub wall_clock_secs: f64,
}

/// A run in progress, advanced one task at a time so callers can inspect the
/// network and freeze state between tasks.
pub struct ContinualRun {
    cfg: ExperimentConfig,
    choice: CellChoice,
    tasks: Vec<TaskData>,
    normalization: Option<Normalization>,
    net: Network,
    freeze: FreezeState,
    selections: Vec<FeatureSelection>,
    datasets: Vec<RelevanceDataset>,
    chain: Option<ClassifierChain>,
    outcomes: Vec<TaskOutcome>,
    started: Instant,
    next_task: usize,
}

/// Load, cap, and split the dataset into tasks, without normalization.
/// `seed` drives the per-class subsampling caps.
pub fn prepare_tasks(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskData>> {
    let (mut train, mut test) = resolve_source(&cfg.dataset)?;
    if let DatasetSource::IdxFiles {
        max_train_per_class,
        max_test_per_class,
        ..
    } = &cfg.dataset
    {
        if let Some(cap) = max_train_per_class {
            cap_per_class(&mut train, *cap, seed, 0);
        }
        if let Some(cap) = max_test_per_class {
            cap_per_class(&mut test, *cap, seed, 1);
        }
    }

    let total: usize = cfg.schedule.iter().sum();
    let order: Vec<usize> = match &cfg.class_order {
        Some(o) => o.clone(),
        None => (0..total).collect(),
    };
    let split = TaskSplit::from_schedule(&order, &cfg.schedule)?;
    let tasks = split_tasks(&train, &test, &split)?;
    for (i, t) in tasks.iter().enumerate() {
        if t.train.is_empty() || t.test.is_empty() {
            return Err(Error::Input(format!("task {i} has an empty split")));
        }
    }
    Ok(tasks)
}

/// Apply a fitted normalization to every sample of every task.
pub fn normalize_tasks(tasks: &mut [TaskData], norm: &Normalization) {
    for t in tasks.iter_mut() {
        for s in t.train.iter_mut().chain(t.test.iter_mut()) {
            apply_one(norm, &mut s.input);
        }
    }
}

impl ContinualRun {
    pub fn new(cfg: &ExperimentConfig, choice: CellChoice) -> Result<ContinualRun> {
        cfg.validate()?;
        if cfg.method == Method::Rerelrp && choice.tau.is_none() {
            return Err(Error::Config(
                "the relevance method needs a tau (prune.taus)".into(),
            ));
        }

        let mut tasks = prepare_tasks(cfg, choice.seed)?;
        let normalization = match dataset_normalization(&cfg.dataset) {
            NormalizationMode::None => None,
            NormalizationMode::FirstTask => {
                let inputs: Vec<_> = tasks[0].train.iter().map(|s| s.input.clone()).collect();
                Some(compute_normalization(&inputs)?)
            }
            NormalizationMode::Explicit { mean, std } => Some(Normalization { mean, std }),
        };
        if let Some(norm) = &normalization {
            normalize_tasks(&mut tasks, norm);
        }

        let net = Network::seeded(
            cfg.network.input_shape.clone(),
            &cfg.network.layers,
            choice.seed,
        )?;
        let freeze = FreezeState::new(&net);

        if cfg.method == Method::Rerelrp {
            // Fail before any training if the memory cannot fit the full
            // sequence.
            let budget = MemoryBudget {
                n_f: cfg.memory.n_f,
                n_r: representatives_needed(cfg.schedule.len()),
                s: cfg.memory.exemplars_per_class,
                reference: cfg.memory.reference.iter().product(),
            };
            let report = check_budget(&budget);
            if !report.ok {
                return Err(Error::BudgetViolation(report.to_string()));
            }
        }

        Ok(ContinualRun {
            cfg: cfg.clone(),
            choice,
            tasks,
            normalization,
            net,
            freeze,
            selections: Vec::new(),
            datasets: Vec::new(),
            chain: None,
            outcomes: Vec::new(),
            started: Instant::now(),
            next_task: 0,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn completed(&self) -> usize {
        self.next_task
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn freeze(&self) -> &FreezeState {
        &self.freeze
    }

    pub fn selections(&self) -> &[FeatureSelection] {
        &self.selections
    }

    pub fn chain(&self) -> Option<&ClassifierChain> {
        self.chain.as_ref()
    }

    pub fn lrp(&self) -> &LrpConfig {
        &self.cfg.lrp
    }

    /// Snapshot for persistence or later evaluation.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            network: self.net.clone(),
            freeze: self.freeze.clone(),
            selections: self.selections.clone(),
            chain: self.chain.clone(),
            normalization: self.normalization.clone(),
            lrp: self.cfg.lrp,
        }
    }

    fn progress(&self, task: TaskId, phase: &str, detail: &str) {
        if self.cfg.progress {
            eprintln!(
                "RRLP|seed={}|task={}|phase={}|{}",
                self.choice.seed, task, phase, detail
            );
        }
    }

    /// Learn the next task and score everything seen so far.
    pub fn step(&mut self) -> Result<&TaskOutcome> {
        let k = self.next_task;
        if k >= self.tasks.len() {
            return Err(Error::Input("all tasks already processed".into()));
        }
        let t0 = Instant::now();
        let classes = self.tasks[k].classes.len();
        self.net.add_head(k, classes)?;

        let (train_set, val_set) = stratified_split(
            &self.tasks[k].train,
            classes,
            self.cfg.val_fraction,
            self.choice.seed,
            k,
        );

        let outcome = match self.cfg.method {
            Method::Rerelrp => self.step_rerelrp(k, &train_set, &val_set)?,
            Method::Finetune => self.step_finetune(k, &train_set, &val_set)?,
            Method::Joint => self.step_joint(k)?,
        };
        let mut outcome = outcome;
        outcome.seconds = t0.elapsed().as_secs_f64();
        self.progress(
            k,
            "done",
            &format!(
                "taw={:.2}|tag={:.2}|available={:.3}|secs={:.1}",
                outcome.taw_row.last().copied().unwrap_or(0.0),
                outcome.tag_row.last().copied().unwrap_or(0.0),
                outcome.available,
                outcome.seconds
            ),
        );
        self.outcomes.push(outcome);
        self.next_task += 1;
        Ok(self.outcomes.last().unwrap())
    }

    fn step_rerelrp(
        &mut self,
        k: TaskId,
        train_set: &[Sample],
        val_set: &[Sample],
    ) -> Result<TaskOutcome> {
        let cfg = &self.cfg;
        let tau = self.choice.tau.unwrap();
        let tcfg = cfg.train_config(self.choice.learning_rate, self.choice.seed);

        self.progress(k, "train", &format!("samples={}", train_set.len()));
        let stats = train_task(
            &mut self.net,
            k,
            TrainData { train: train_set, val: val_set },
            &tcfg,
            &self.freeze,
        )?;

        // One relevance sweep feeds both pruning (normalized) and feature
        // selection (absolute).
        let rel_pool = seeded_subset(
            train_set,
            cfg.relevance_sample_cap,
            self.choice.seed,
            rng::tagged(stream::SUBSAMPLE, &[1, k as u64]),
        );
        self.progress(k, "relevance", &format!("samples={}", rel_pool.len()));
        let mr = mean_relevance(&self.net, &rel_pool, k, &cfg.lrp)?;

        let pcfg = PruneConfig { tau, chunk_fraction: cfg.prune.chunk_fraction };
        let prune = prune_to_threshold(&self.net, val_set, k, &self.freeze, &mr.mean_norm, &pcfg)?;
        self.progress(
            k,
            "prune",
            &format!(
                "kept={}|full_acc={:.2}|submodel_acc={:.2}",
                prune.kept.len(),
                prune.full_acc,
                prune.submodel_acc
            ),
        );
        self.freeze = freeze_task(&self.freeze, &prune.kept, k)?;

        let selection = select_features_mean(k, &mr.mean_abs, cfg.memory.n_f)?;

        // Herd exemplars per class in signature space, then turn them into
        // relevance rows for this task and every earlier one. The raw
        // exemplars do not outlive this step.
        let store = self.herd_exemplars(k, train_set, &selection)?;
        let exemplars = store.ordered();
        let mut ds = RelevanceDataset::new(k, cfg.memory.n_f);
        let rows = build_relevance_rows(
            &self.net,
            &self.freeze,
            k,
            &exemplars,
            &selection,
            &cfg.lrp,
        )?;
        ds.append(k, rows)?;
        self.selections.push(selection);
        refresh_old_tasks(
            &self.net,
            &self.freeze,
            &self.selections,
            &mut self.datasets,
            k,
            &exemplars,
            &cfg.lrp,
        )?;
        self.datasets.push(ds);

        let budget = MemoryBudget {
            n_f: cfg.memory.n_f,
            n_r: representatives_needed(k + 1),
            s: cfg.memory.exemplars_per_class,
            reference: cfg.memory.reference.iter().product(),
        };
        let report = check_budget(&budget);
        if !report.ok {
            return Err(Error::BudgetViolation(report.to_string()));
        }

        self.progress(k, "chain", &format!("datasets={}", self.datasets.len()));
        let fcfg = ForestConfig {
            seed: rng::derive_seed(self.choice.seed, stream::FOREST),
            ..cfg.forest
        };
        self.chain = Some(chain_fit(&self.datasets, &fcfg)?);

        let (taw_row, tag_row) = self.eval_rerelrp(k)?;
        Ok(TaskOutcome {
            task: k,
            train: stats,
            prune: Some(prune),
            budget: Some(report),
            taw_row,
            tag_row,
            available: available_fraction(&self.freeze),
            seconds: 0.0,
        })
    }

    fn herd_exemplars(
        &self,
        k: TaskId,
        train_set: &[Sample],
        selection: &FeatureSelection,
    ) -> Result<ExemplarStore> {
        let cfg = &self.cfg;
        let mut store = ExemplarStore::new(k, cfg.memory.exemplars_per_class);
        for (local, &global) in self.tasks[k].classes.iter().enumerate() {
            let pool: Vec<Sample> = train_set
                .iter()
                .filter(|s| s.label == local)
                .cloned()
                .collect();
            let pool = seeded_subset(
                &pool,
                cfg.memory.herd_pool_per_class,
                self.choice.seed,
                rng::tagged(stream::SUBSAMPLE, &[2, k as u64, local as u64]),
            );
            if pool.is_empty() {
                return Err(Error::Input(format!(
                    "task {k} class {local} has no training samples to herd"
                )));
            }
            let sigs: Vec<Vec<f64>> = pool
                .iter()
                .map(|s| {
                    relevance_signature(&self.net, &self.freeze, k, selection, &s.input, &cfg.lrp)
                        .map(|(f, _)| f)
                })
                .collect::<Result<_>>()?;
            let take = cfg.memory.exemplars_per_class.min(pool.len());
            let chosen = crate::memory::herd_select(&sigs, take)?;
            store.insert_class(global, chosen.iter().map(|&i| pool[i].input.clone()).collect())?;
        }
        Ok(store)
    }

    fn eval_rerelrp(&self, k: TaskId) -> Result<(Vec<f64>, Vec<f64>)> {
        let chain = self.chain.as_ref().expect("chain fitted before evaluation");
        let mut taw_row = Vec::with_capacity(k + 1);
        let mut tag_row = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let mask = submodel_mask(&self.freeze, i)?;
            taw_row.push(accuracy(&self.net, &self.tasks[i].test, i, Some(&mask))?);
            let mut hits = 0usize;
            for s in &self.tasks[i].test {
                let p = predict(
                    &self.net,
                    &self.freeze,
                    chain,
                    &self.selections,
                    &s.input,
                    &self.cfg.lrp,
                )?;
                if p.task == i && p.class == s.label {
                    hits += 1;
                }
            }
            tag_row.push(100.0 * hits as f64 / self.tasks[i].test.len() as f64);
        }
        Ok((taw_row, tag_row))
    }

    fn step_finetune(
        &mut self,
        k: TaskId,
        train_set: &[Sample],
        val_set: &[Sample],
    ) -> Result<TaskOutcome> {
        let tcfg = self
            .cfg
            .train_config(self.choice.learning_rate, self.choice.seed);
        self.progress(k, "train", &format!("samples={}", train_set.len()));
        let stats = train_task(
            &mut self.net,
            k,
            TrainData { train: train_set, val: val_set },
            &tcfg,
            &self.freeze,
        )?;
        let (taw_row, tag_row) = self.eval_heads(k)?;
        Ok(TaskOutcome {
            task: k,
            train: stats,
            prune: None,
            budget: None,
            taw_row,
            tag_row,
            available: 1.0,
            seconds: 0.0,
        })
    }

    fn step_joint(&mut self, k: TaskId) -> Result<TaskOutcome> {
        let tcfg = self
            .cfg
            .train_config(self.choice.learning_rate, self.choice.seed);
        // Union of every task seen so far, each split the same way as in the
        // single-task methods.
        let mut splits: Vec<(Vec<Sample>, Vec<Sample>)> = Vec::with_capacity(k + 1);
        for i in 0..=k {
            splits.push(stratified_split(
                &self.tasks[i].train,
                self.tasks[i].classes.len(),
                self.cfg.val_fraction,
                self.choice.seed,
                i,
            ));
        }
        let mut train_pairs: Vec<(TaskId, &Sample)> = Vec::new();
        let mut val_pairs: Vec<(TaskId, &Sample)> = Vec::new();
        for (i, (tr, va)) in splits.iter().enumerate() {
            train_pairs.extend(tr.iter().map(|s| (i, s)));
            val_pairs.extend(va.iter().map(|s| (i, s)));
        }
        self.progress(k, "train", &format!("samples={}", train_pairs.len()));
        let stats = train_joint(&mut self.net, &train_pairs, &val_pairs, &tcfg, &self.freeze)?;
        let (taw_row, tag_row) = self.eval_heads(k)?;
        Ok(TaskOutcome {
            task: k,
            train: stats,
            prune: None,
            budget: None,
            taw_row,
            tag_row,
            available: 1.0,
            seconds: 0.0,
        })
    }

    /// Baseline scoring: task-aware uses the right head on the full network;
    /// task-agnostic takes the highest logit across all heads.
    fn eval_heads(&self, k: TaskId) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut taw_row = Vec::with_capacity(k + 1);
        let mut tag_row = Vec::with_capacity(k + 1);
        for i in 0..=k {
            taw_row.push(accuracy(&self.net, &self.tasks[i].test, i, None)?);
            let mut hits = 0usize;
            for s in &self.tasks[i].test {
                let mut best: Option<(f64, TaskId, usize)> = None;
                for j in 0..=k {
                    let (logits, _) = self.net.forward(&s.input, j)?;
                    let c = argmax(logits.values());
                    let v = logits.values()[c];
                    if best.map_or(true, |(bv, _, _)| v > bv) {
                        best = Some((v, j, c));
                    }
                }
                let (_, j, c) = best.unwrap();
                if j == i && c == s.label {
                    hits += 1;
                }
            }
            tag_row.push(100.0 * hits as f64 / self.tasks[i].test.len() as f64);
        }
        Ok((taw_row, tag_row))
    }

    /// Wrap up after the last task.
    pub fn into_result(self) -> Result<RunResult> {
        if self.next_task != self.tasks.len() {
            return Err(Error::Input(format!(
                "run stopped after {} of {} tasks",
                self.next_task,
                self.tasks.len()
            )));
        }
        let mut taw = AccuracyMatrix::new();
        let mut tag = AccuracyMatrix::new();
        let mut available = Vec::with_capacity(self.outcomes.len());
        for o in &self.outcomes {
            taw.push_row(o.taw_row.clone())?;
            tag.push_row(o.tag_row.clone())?;
            available.push(o.available);
        }
        let t = self.tasks.len();
        let final_taw = average_accuracy(&taw, t - 1)?;
        let final_tag = average_accuracy(&tag, t - 1)?;
        let (forgetting_taw, forgetting_tag) = if t >= 2 {
            (Some(forgetting(&taw, t)?), Some(forgetting(&tag, t)?))
        } else {
            (None, None)
        };
        Ok(RunResult {
            method: self.cfg.method,
            seed: self.choice.seed,
            learning_rate: self.choice.learning_rate,
            tau: self.choice.tau,
            metrics: MetricsTable { taw, tag, available },
            final_taw,
            final_tag,
            forgetting_taw,
            forgetting_tag,
            budget: self.outcomes.iter().rev().find_map(|o| o.budget),
            tasks: self.outcomes,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
        })
    }

    /// Persist the current state, e.g. after the final task.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }
}

/// Run one grid cell start to finish.
pub fn run_continual(cfg: &ExperimentConfig, choice: CellChoice) -> Result<RunResult> {
    let mut run = ContinualRun::new(cfg, choice)?;
    for _ in 0..run.task_count() {
        run.step()?;
    }
    run.into_result()
}

/// Run the full grid: seeds x learning rates x (taus for the relevance
/// method, a single cell per learning rate for the baselines).
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let taus: Vec<Option<f64>> = match cfg.method {
        Method::Rerelrp => cfg.prune.taus.iter().map(|&t| Some(t)).collect(),
        _ => vec![None],
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        for &lr in &cfg.train.learning_rates {
            for &tau in &taus {
                out.push(run_continual(cfg, CellChoice { seed, learning_rate: lr, tau })?);
            }
        }
    }
    Ok(out)
}

/// The cell a seed settled on, with its headline numbers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ChosenCell {
    pub seed: u64,
    pub learning_rate: f64,
    pub tau: Option<f64>,
    pub final_taw: f64,
    pub final_tag: f64,
    pub forgetting_taw: Option<f64>,
    pub forgetting_tag: Option<f64>,
}

/// Grid outcome: per-seed winners and their across-seed means.
#[derive(Debug, Clone, Serialize)]
pub struct GridSelection {
    pub chosen: Vec<ChosenCell>,
    pub mean_final_taw: f64,
    pub mean_final_tag: f64,
    pub mean_forgetting_taw: Option<f64>,
    pub mean_forgetting_tag: Option<f64>,
}

/// For each seed keep the cell with the best final task-agnostic accuracy
/// (ties keep the earlier cell), then average the winners across seeds.
pub fn grid_select(results: &[RunResult]) -> Result<GridSelection> {
    if results.is_empty() {
        return Err(Error::Input("grid_select over no runs".into()));
    }
    let mut seed_order: Vec<u64> = Vec::new();
    for r in results {
        if !seed_order.contains(&r.seed) {
            seed_order.push(r.seed);
        }
    }
    let mut chosen = Vec::with_capacity(seed_order.len());
    for seed in seed_order {
        let best = results
            .iter()
            .filter(|r| r.seed == seed)
            .reduce(|a, b| if b.final_tag > a.final_tag { b } else { a })
            .unwrap();
        chosen.push(ChosenCell {
            seed,
            learning_rate: best.learning_rate,
            tau: best.tau,
            final_taw: best.final_taw,
            final_tag: best.final_tag,
            forgetting_taw: best.forgetting_taw,
            forgetting_tag: best.forgetting_tag,
        });
    }
    let n = chosen.len() as f64;
    let mean = |f: &dyn Fn(&ChosenCell) -> f64| chosen.iter().map(|c| f(c)).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&ChosenCell) -> Option<f64>| {
        let vals: Option<Vec<f64>> = chosen.iter().map(|c| f(c)).collect();
        vals.map(|v| v.iter().sum::<f64>() / n)
    };
    Ok(GridSelection {
        mean_final_taw: mean(&|c: &ChosenCell| c.final_taw),
        mean_final_tag: mean(&|c: &ChosenCell| c.final_tag),
        mean_forgetting_taw: mean_opt(&|c: &ChosenCell| c.forgetting_taw),
        mean_forgetting_tag: mean_opt(&|c: &ChosenCell| c.forgetting_tag),
        chosen,
    })
}

fn dataset_normalization(source: &DatasetSource) -> NormalizationMode {
    match source {
        DatasetSource::IdxFiles { normalization, .. } => normalization.clone(),
        DatasetSource::SyntheticBlobs(_) => NormalizationMode::None,
    }
}

fn apply_one(norm: &Normalization, input: &mut crate::tensor::Tensor) {
    let mut one = [input.clone()];
    apply_normalization(norm, &mut one);
    let [t] = one;
    *input = t;
}

/// Keep at most `cap` samples per class, chosen by a seeded shuffle but kept
/// in their original order.
fn cap_per_class(ds: &mut LabeledDataset, cap: usize, seed: u64, split: u64) {
    let classes: BTreeSet<usize> = ds.labels.iter().copied().collect();
    let mut keep: Vec<usize> = Vec::new();
    for class in classes {
        let mut idx: Vec<usize> = (0..ds.labels.len())
            .filter(|&i| ds.labels[i] == class)
            .collect();
        let mut rng = rng::rng_from(
            seed,
            rng::tagged(stream::SUBSAMPLE, &[0, split, class as u64]),
        );
        idx.shuffle(&mut rng);
        idx.truncate(cap);
        keep.extend(idx);
    }
    keep.sort_unstable();
    ds.inputs = keep.iter().map(|&i| ds.inputs[i].clone()).collect();
    ds.labels = keep.iter().map(|&i| ds.labels[i]).collect();
}

/// Per-class shuffled split into (train, validation); every class keeps at
/// least one training sample, and classes with at least two samples also
/// land in validation when the fraction is positive.
fn stratified_split(
    samples: &[Sample],
    classes: usize,
    val_fraction: f64,
    seed: u64,
    task: TaskId,
) -> (Vec<Sample>, Vec<Sample>) {
    let mut rng = rng::rng_from(seed, rng::tagged(stream::VAL_SPLIT, &[task as u64]));
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..classes {
        let mut idx: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let mut n_val = (val_fraction * idx.len() as f64).round() as usize;
        if val_fraction > 0.0 && n_val == 0 && idx.len() >= 2 {
            n_val = 1;
        }
        if n_val >= idx.len() && !idx.is_empty() {
            n_val = idx.len() - 1;
        }
        for (pos, &i) in idx.iter().enumerate() {
            if pos < n_val {
                val.push(samples[i].clone());
            } else {
                train.push(samples[i].clone());
            }
        }
    }
    (train, val)
}

/// Seeded subsample without replacement, original order preserved; `None`
/// keeps everything.
fn seeded_subset(samples: &[Sample], cap: Option<usize>, seed: u64, tag: u64) -> Vec<Sample> {
    match cap {
        Some(cap) if cap < samples.len() => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            let mut rng = rng::rng_from(seed, tag);
            idx.shuffle(&mut rng);
            idx.truncate(cap);
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i].clone()).collect()
        }
        _ => samples.to_vec(),
    }
}
