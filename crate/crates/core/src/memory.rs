//! Exemplar herding, relevance-dataset construction, mean-relevance feature
//! selection, cross-task refresh, and the memory budget accounting that keeps
//! stored relevance rows within a raw-exemplar-sized footprint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freezer::{submodel_mask, FreezeState, NeuronId};
use crate::lrp::{backpropagate_relevance, LrpConfig};
use crate::nncore::{argmax, Network, TaskId};
use crate::tensor::Tensor;

/// Raw exemplars of the task currently being consolidated. These live only
/// until the task's relevance rows (and the refresh of older datasets) are
/// built, then the store is dropped; no raw data crosses a task boundary.
#[derive(Debug, Clone)]
pub struct ExemplarStore {
    task: TaskId,
    capacity_per_class: usize,
    classes: BTreeMap<usize, Vec<Tensor>>,
}

impl ExemplarStore {
    pub fn new(task: TaskId, capacity_per_class: usize) -> ExemplarStore {
        ExemplarStore {
            task,
            capacity_per_class,
            classes: BTreeMap::new(),
        }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn capacity_per_class(&self) -> usize {
        self.capacity_per_class
    }

    /// Insert one class's exemplars in herding order.
    pub fn insert_class(&mut self, class: usize, exemplars: Vec<Tensor>) -> Result<()> {
        if exemplars.len() > self.capacity_per_class {
            return Err(Error::Input(format!(
                "class {} holds {} exemplars, capacity is {}",
                class,
                exemplars.len(),
                self.capacity_per_class
            )));
        }
        if self.classes.contains_key(&class) {
            return Err(Error::Input(format!("class {class} already stored")));
        }
        self.classes.insert(class, exemplars);
        Ok(())
    }

    /// All exemplars, classes ascending, herd rank preserved within a class.
    /// This order defines row identity across relevance datasets.
    pub fn ordered(&self) -> Vec<&Tensor> {
        self.classes.values().flat_map(|v| v.iter()).collect()
    }

    pub fn total(&self) -> usize {
        self.classes.values().map(|v| v.len()).sum()
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }
}

/// Greedy herding toward the class mean: repeatedly add the sample whose
/// inclusion moves the running exemplar mean closest (Euclidean) to the full
/// mean. Ties go to the lowest index; the result for k is a prefix of k+1.
pub fn herd_select(samples: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if k > samples.len() {
        return Err(Error::Input(format!(
            "herding {} exemplars from {} samples",
            k,
            samples.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let dim = samples[0].len();
    if samples.iter().any(|s| s.len() != dim) {
        return Err(Error::dim("herding candidates differ in length"));
    }

    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= samples.len() as f64;
    }

    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    let mut taken = vec![false; samples.len()];
    let mut running_sum = vec![0.0; dim];
    for step in 1..=k {
        let inv = 1.0 / step as f64;
        let mut best_idx = usize::MAX;
        let mut best_dist = f64::INFINITY;
        for (i, s) in samples.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let mut dist = 0.0;
            for d in 0..dim {
                let diff = mean[d] - (running_sum[d] + s[d]) * inv;
                dist += diff * diff;
            }
            if dist < best_dist {
                best_dist = dist;
                best_idx = i;
            }
        }
        taken[best_idx] = true;
        chosen.push(best_idx);
        for (acc, v) in running_sum.iter_mut().zip(&samples[best_idx]) {
            *acc += v;
        }
    }
    Ok(chosen)
}

/// The n_f neurons a task's signatures are restricted to, in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub task: TaskId,
    pub neurons: Vec<NeuronId>,
}

impl FeatureSelection {
    pub fn n_f(&self) -> usize {
        self.neurons.len()
    }
}

/// Top n_f neurons by mean |r|, ties broken by (layer, unit) ascending.
pub fn select_features_mean(
    task: TaskId,
    mean_abs_r: &[Vec<f64>],
    n_f: usize,
) -> Result<FeatureSelection> {
    let total: usize = mean_abs_r.iter().map(|l| l.len()).sum();
    if n_f > total {
        return Err(Error::Input(format!(
            "selecting {n_f} features from {total} neurons"
        )));
    }
    let mut all: Vec<(NeuronId, f64)> = Vec::with_capacity(total);
    for (layer, vals) in mean_abs_r.iter().enumerate() {
        for (unit, &v) in vals.iter().enumerate() {
            all.push((NeuronId { layer, unit }, v));
        }
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let neurons = all.into_iter().take(n_f).map(|(n, _)| n).collect();
    Ok(FeatureSelection { task, neurons })
}

/// One stored relevance row: the signature of some exemplar through this
/// dataset's subnetwork, labeled with the task the exemplar came from (which
/// is also the task that was current when the row was built).
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceRow {
    pub source_task: TaskId,
    pub features: Vec<f64>,
}

/// D_R for one task: in-distribution rows from its own exemplars plus
/// out-of-distribution rows appended by later tasks' refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceDataset {
    pub task: TaskId,
    pub n_f: usize,
    pub rows: Vec<RelevanceRow>,
}

impl RelevanceDataset {
    pub fn new(task: TaskId, n_f: usize) -> RelevanceDataset {
        RelevanceDataset {
            task,
            n_f,
            rows: Vec::new(),
        }
    }

    pub fn append(&mut self, source_task: TaskId, rows: Vec<Vec<f64>>) -> Result<()> {
        for r in &rows {
            if r.len() != self.n_f {
                return Err(Error::dim(format!(
                    "relevance row has {} features, dataset expects {}",
                    r.len(),
                    self.n_f
                )));
            }
        }
        self.rows.extend(
            rows.into_iter()
                .map(|features| RelevanceRow { source_task, features }),
        );
        Ok(())
    }

    /// Number of distinct source-task row groups.
    pub fn group_count(&self) -> usize {
        let mut tasks: Vec<TaskId> = self.rows.iter().map(|r| r.source_task).collect();
        tasks.dedup();
        tasks.len()
    }

    /// Rows of one source task in stored (exemplar) order.
    pub fn rows_of(&self, source_task: TaskId) -> Vec<&RelevanceRow> {
        self.rows
            .iter()
            .filter(|r| r.source_task == source_task)
            .collect()
    }
}

/// Signature of one input through task `i`'s frozen subnetwork: masked
/// forward, LRP from the predicted class, then the selected features in
/// selection order. Returns the features and the predicted local class.
pub fn relevance_signature(
    net: &Network,
    freeze: &FreezeState,
    task: TaskId,
    selection: &FeatureSelection,
    x: &Tensor,
    cfg: &LrpConfig,
) -> Result<(Vec<f64>, usize)> {
    if selection.task != task {
        return Err(Error::Input(format!(
            "selection belongs to task {}, signature requested for task {}",
            selection.task, task
        )));
    }
    let mask = submodel_mask(freeze, task)?;
    let (logits, trace) = net.forward_masked(x, task, Some(&mask))?;
    let class = argmax(logits.values());
    let rmap = backpropagate_relevance(net, &trace, task, class, cfg)?;
    let neuron = rmap.neuron_view(net);
    let features = selection
        .neurons
        .iter()
        .map(|n| neuron[n.layer][n.unit])
        .collect();
    Ok((features, class))
}

/// Relevance rows of `exemplars` through task `i`'s subnetwork, in order.
pub fn build_relevance_rows(
    net: &Network,
    freeze: &FreezeState,
    task: TaskId,
    exemplars: &[&Tensor],
    selection: &FeatureSelection,
    cfg: &LrpConfig,
) -> Result<Vec<Vec<f64>>> {
    if exemplars.is_empty() {
        return Err(Error::Input("build_relevance_rows without exemplars".into()));
    }
    exemplars
        .iter()
        .map(|x| relevance_signature(net, freeze, task, selection, x, cfg).map(|(f, _)| f))
        .collect()
}

/// When task `t` arrives, push its exemplars through every older subnetwork
/// and append the resulting rows (labeled task t) to those datasets.
pub fn refresh_old_tasks(
    net: &Network,
    freeze: &FreezeState,
    selections: &[FeatureSelection],
    datasets: &mut [RelevanceDataset],
    new_task: TaskId,
    new_exemplars: &[&Tensor],
    cfg: &LrpConfig,
) -> Result<()> {
    for ds in datasets.iter_mut() {
        if ds.task >= new_task {
            continue;
        }
        let selection = selections
            .iter()
            .find(|s| s.task == ds.task)
            .ok_or(Error::MissingTask(ds.task))?;
        let rows = build_relevance_rows(net, freeze, ds.task, new_exemplars, selection, cfg)?;
        ds.append(new_task, rows)?;
    }
    Ok(())
}

/// Total representatives per old task after t tasks: 1 + 2 + ... + t.
pub fn representatives_needed(t: usize) -> usize {
    t * (t + 1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    /// Features per stored relevance row.
    pub n_f: usize,
    /// Representative sets held over the whole run: with t tasks each task i
    /// carries rows from itself and every later task, 1 + 2 + ... + t total.
    pub n_r: usize,
    /// Exemplars per class.
    pub s: usize,
    /// Product a raw-exemplar memory of the same role would occupy; the
    /// relevance memory must stay within it.
    pub reference: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub ok: bool,
    pub product: u64,
    pub reference: u64,
}

impl std::fmt::Display for BudgetReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "stored product {} vs reference {} -> {}",
            self.product,
            self.reference,
            if self.ok { "ok" } else { "violation" }
        )
    }
}

/// Budget check: n_f * n_r * s must not exceed the reference product. The
/// inequality is non-strict.
pub fn check_budget(budget: &MemoryBudget) -> BudgetReport {
    let product = budget.n_f as u64 * budget.n_r as u64 * budget.s as u64;
    BudgetReport {
        ok: product <= budget.reference,
        product,
        reference: budget.reference,
    }
}

/// check_budget, escalated to an error for the orchestrator's per-task gate.
pub fn ensure_budget(budget: &MemoryBudget) -> Result<BudgetReport> {
    let report = check_budget(budget);
    if !report.ok {
        return Err(Error::BudgetViolation(report.to_string()));
    }
    Ok(report)
}

/// Persist a relevance dataset as CSV: task, source_task, f0..f{n_f-1}.
pub fn write_relevance_csv(path: &Path, ds: &RelevanceDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["task".to_string(), "source_task".to_string()];
    header.extend((0..ds.n_f).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for row in &ds.rows {
        let mut rec = vec![ds.task.to_string(), row.source_task.to_string()];
        rec.extend(row.features.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_relevance_csv(path: &Path) -> Result<RelevanceDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() < 3 || &header[0] != "task" || &header[1] != "source_task" {
        return Err(Error::Format(format!(
            "relevance CSV header must start with task,source_task: {:?}",
            header
        )));
    }
    let n_f = header.len() - 2;
    let mut task: Option<TaskId> = None;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let row_task: TaskId = parse_field(&rec[0], "task")?;
        match task {
            None => task = Some(row_task),
            Some(t) if t != row_task => {
                return Err(Error::Format(format!(
                    "relevance CSV mixes tasks {t} and {row_task}"
                )))
            }
            _ => {}
        }
        let source_task: TaskId = parse_field(&rec[1], "source_task")?;
        let mut features = Vec::with_capacity(n_f);
        for i in 0..n_f {
            features.push(parse_field::<f64>(&rec[2 + i], "feature")?);
        }
        rows.push(RelevanceRow { source_task, features });
    }
    let task = task.ok_or_else(|| Error::Format("relevance CSV has no rows".into()))?;
    Ok(RelevanceDataset { task, n_f, rows })
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Format(format!("bad {what} value {s:?}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
