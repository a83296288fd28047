//! `rrlp`: run continual-learning experiments, evaluate checkpoints, explain
//! task inference, export relevance heatmaps, and verify memory budgets.
//!
//! Exit codes: 0 success, 2 config/format problem, 3 memory-budget violation,
//! 4 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::{json, Value};

use rrlp_core::dataio::{load_checkpoint, Checkpoint};
use rrlp_core::error::{Error, Result};
use rrlp_core::freezer::submodel_mask;
use rrlp_core::lrp::{backpropagate_relevance, input_heatmap, write_heatmap_csv, write_heatmap_pgm};
use rrlp_core::memory::{check_budget, relevance_signature, representatives_needed, MemoryBudget};
use rrlp_core::metrics::{average_accuracy, forgetting, read_metrics_csv, write_metrics_csv};
use rrlp_core::nncore::{accuracy, argmax};
use rrlp_core::orchestrator::{
    grid_select, normalize_tasks, prepare_tasks, CellChoice, ContinualRun, ExperimentConfig,
    Method, RunResult,
};
use rrlp_core::taskinfer::predict;
use rrlp_core::Tensor;

#[derive(Parser)]
#[command(
    name = "rrlp",
    version,
    about = "Continual learning with relevance-guided neuron freezing"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Run the configured experiment grid and write manifest, metrics CSV,
    /// and checkpoint into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Dotted-path config override, e.g. --override train.epochs=5
        /// (repeatable; value parsed as JSON, falling back to a string).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Allow writing into a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Re-score a checkpoint on the dataset and task split of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Explain which task the classifier chain assigns to one sample and why.
    ExplainTask {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON sample file: {"shape": [...], "values": [...]}.
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Relevance heatmap of one sample through a task's subnetwork.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Explain this head; defaults to the chain's inferred task.
        #[arg(long)]
        task: Option<usize>,
        /// Explain this class's logit; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        overwrite: bool,
    },
    /// Check the memory budget of a config without running anything.
    Budget {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute summary metrics from a run directory's metrics CSV and
    /// cross-check them against its manifest.
    Metrics {
        /// Run directory holding metrics.csv (and optionally manifest.json).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli.verb) {
        eprintln!("error: {e}");
        let code = match &e {
            Error::Config(_) | Error::Format(_) => 2,
            Error::BudgetViolation(_) => 3,
            _ => 4,
        };
        std::process::exit(code);
    }
}

fn dispatch(verb: Verb) -> Result<()> {
    match verb {
        Verb::Run { config, out, seed, overrides, overwrite } => {
            run(&config, &out, seed, &overrides, overwrite)
        }
        Verb::Eval { checkpoint, config, overrides } => eval(&checkpoint, &config, &overrides),
        Verb::ExplainTask { checkpoint, sample, out, overwrite } => {
            explain_task(&checkpoint, &sample, &out, overwrite)
        }
        Verb::Heatmap { checkpoint, sample, out, task, class, overwrite } => {
            heatmap(&checkpoint, &sample, &out, task, class, overwrite)
        }
        Verb::Budget { config, overrides } => budget(&config, &overrides),
        Verb::Metrics { out } => metrics(&out),
    }
}

/// Parse the JSON config, apply dotted overrides, then deserialize+validate.
fn load_config(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
    for ov in overrides {
        apply_override(&mut v, ov)?;
    }
    if let Some(s) = seed {
        v["seeds"] = json!([s]);
    }
    let cfg: ExperimentConfig = serde_json::from_value(v)
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Set `a.b.c=value` inside a JSON tree; numeric segments index arrays.
fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let segments: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        match node {
            Value::Array(items) => {
                let idx: usize = seg.parse().map_err(|_| {
                    Error::Config(format!(
                        "override {path}: segment {seg:?} must index an array"
                    ))
                })?;
                if idx >= items.len() {
                    return Err(Error::Config(format!(
                        "override {path}: index {idx} outside array of {}",
                        items.len()
                    )));
                }
                if last {
                    items[idx] = value;
                    return Ok(());
                }
                node = &mut items[idx];
            }
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                node = map
                    .entry(seg.to_string())
                    .or_insert_with(|| Value::Object(serde_json::Map::new()));
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {path}: segment {seg:?} does not address an object"
                )))
            }
        }
    }
    Ok(())
}

/// Refuse to write into a non-empty directory unless --overwrite was given.
fn prepare_out(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty && !overwrite {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --overwrite to reuse it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn run(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    overrides: &[String],
    overwrite: bool,
) -> Result<()> {
    let cfg = load_config(config, overrides, seed)?;
    prepare_out(out, overwrite)?;

    let taus: Vec<Option<f64>> = match cfg.method {
        Method::Rerelrp => cfg.prune.taus.iter().map(|&t| Some(t)).collect(),
        _ => vec![None],
    };
    let mut cells: Vec<CellChoice> = Vec::new();
    for &seed in &cfg.seeds {
        for &lr in &cfg.train.learning_rates {
            for &tau in &taus {
                cells.push(CellChoice { seed, learning_rate: lr, tau });
            }
        }
    }
    let single = cells.len() == 1;

    let mut results: Vec<RunResult> = Vec::new();
    let mut cell_entries: Vec<Value> = Vec::new();
    for choice in cells {
        let mut run = ContinualRun::new(&cfg, choice)?;
        for _ in 0..run.task_count() {
            run.step()?;
        }
        let dir = if single {
            out.to_path_buf()
        } else {
            let tau_part = choice
                .tau
                .map(|t| format!("_tau{t}"))
                .unwrap_or_default();
            out.join("cells")
                .join(format!("seed{}_lr{}{}", choice.seed, choice.learning_rate, tau_part))
        };
        fs::create_dir_all(&dir)?;
        run.save(&dir.join("checkpoint.bin"))?;
        let result = run.into_result()?;
        write_metrics_csv(&dir.join("metrics.csv"), &result.metrics)?;
        write_json(
            &dir.join("manifest.json"),
            &json!({ "config": cfg, "result": result }),
        )?;
        println!(
            "cell seed={} lr={} tau={}: A_taw={:.2} A_tag={:.2} forgetting_tag={}",
            choice.seed,
            choice.learning_rate,
            choice.tau.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            result.final_taw,
            result.final_tag,
            result
                .forgetting_tag
                .map(|f| format!("{f:.2}"))
                .unwrap_or_else(|| "-".into()),
        );
        cell_entries.push(json!({
            "dir": dir.strip_prefix(out).unwrap_or(&dir).to_string_lossy(),
            "seed": choice.seed,
            "learning_rate": choice.learning_rate,
            "tau": choice.tau,
            "final_taw": result.final_taw,
            "final_tag": result.final_tag,
        }));
        results.push(result);
    }

    let selection = grid_select(&results)?;
    if !single {
        write_json(
            &out.join("manifest.json"),
            &json!({ "config": cfg, "cells": cell_entries, "selection": selection }),
        )?;
    } else {
        // Fold the (trivial) selection into the single cell's manifest.
        let manifest_path = out.join("manifest.json");
        let mut v: Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        v["selection"] = serde_json::to_value(&selection)
            .map_err(|e| Error::Format(format!("selection: {e}")))?;
        write_json(&manifest_path, &v)?;
    }
    println!(
        "selection: mean A_taw={:.2} mean A_tag={:.2} over {} seed(s)",
        selection.mean_final_taw,
        selection.mean_final_tag,
        selection.chosen.len()
    );
    Ok(())
}

fn eval(checkpoint: &Path, config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides, None)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let net = &ckpt.network;
    let mut tasks = prepare_tasks(&cfg, net.rng_seed())?;
    if let Some(norm) = &ckpt.normalization {
        normalize_tasks(&mut tasks, norm);
    }
    let heads: Vec<usize> = net.heads().keys().copied().collect();
    if heads.is_empty() {
        return Err(Error::Input("checkpoint has no task heads".into()));
    }
    if *heads.last().unwrap() >= tasks.len() {
        return Err(Error::Input(format!(
            "checkpoint knows task {} but the config only defines {} tasks",
            heads.last().unwrap(),
            tasks.len()
        )));
    }

    let mut taw_row = Vec::new();
    let mut tag_row = Vec::new();
    for &i in &heads {
        let test = &tasks[i].test;
        match &ckpt.chain {
            Some(chain) => {
                let mask = submodel_mask(&ckpt.freeze, i)?;
                taw_row.push(accuracy(net, test, i, Some(&mask))?);
                let mut hits = 0usize;
                for s in test {
                    let p = predict(net, &ckpt.freeze, chain, &ckpt.selections, &s.input, &ckpt.lrp)?;
                    if p.task == i && p.class == s.label {
                        hits += 1;
                    }
                }
                tag_row.push(100.0 * hits as f64 / test.len() as f64);
            }
            None => {
                taw_row.push(accuracy(net, test, i, None)?);
                let mut hits = 0usize;
                for s in test {
                    let mut best: Option<(f64, usize, usize)> = None;
                    for &j in &heads {
                        let (logits, _) = net.forward(&s.input, j)?;
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
                tag_row.push(100.0 * hits as f64 / test.len() as f64);
            }
        }
    }
    for (pos, &i) in heads.iter().enumerate() {
        println!("task {i}: acc_taw={} acc_tag={}", taw_row[pos], tag_row[pos]);
    }
    let n = heads.len() as f64;
    println!(
        "average: A_taw={} A_tag={}",
        taw_row.iter().sum::<f64>() / n,
        tag_row.iter().sum::<f64>() / n
    );
    Ok(())
}

#[derive(Deserialize)]
struct SampleFile {
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn read_sample(path: &Path, ckpt: &Checkpoint) -> Result<Tensor> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read sample {}: {e}", path.display())))?;
    let parsed: SampleFile = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("sample file: {e}")))?;
    let mut x = Tensor::new(parsed.shape, parsed.values)?;
    if let Some(norm) = &ckpt.normalization {
        let mut one = [x];
        rrlp_core::dataio::apply_normalization(norm, &mut one);
        let [t] = one;
        x = t;
    }
    Ok(x)
}

fn explain_task(checkpoint: &Path, sample: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let chain = ckpt
        .chain
        .as_ref()
        .ok_or_else(|| Error::Input("checkpoint has no fitted task-inference chain".into()))?;
    if ckpt.freeze.history().is_empty() {
        return Err(Error::Input("checkpoint has no frozen tasks to explain".into()));
    }
    let x = read_sample(sample, &ckpt)?;
    prepare_out(out, overwrite)?;

    let pred = predict(&ckpt.network, &ckpt.freeze, chain, &ckpt.selections, &x, &ckpt.lrp)?;
    let probs = &pred.probabilities;

    let mut report = String::new();
    let _ = writeln!(report, "task inference report");
    let _ = writeln!(report, "stages: {}", chain.stages.len());
    for (pos, stage) in chain.stages.iter().enumerate() {
        let _ = writeln!(
            report,
            "stage {pos}: task={} P={} p={}",
            stage.task, probs.stage[pos], probs.p[pos]
        );
    }
    let _ = writeln!(report, "residual: {}", probs.residual);
    let total: f64 = probs.p.iter().sum::<f64>() + probs.residual;
    let _ = writeln!(report, "probability total: {total}");
    let _ = writeln!(report, "chosen task: {}", pred.task);
    let _ = writeln!(report, "predicted class (task-local): {}", pred.class);

    // The chosen task's signature, largest magnitude first.
    let selection = ckpt
        .selections
        .iter()
        .find(|s| s.task == pred.task)
        .ok_or(Error::MissingTask(pred.task))?;
    let (features, _) = relevance_signature(
        &ckpt.network,
        &ckpt.freeze,
        pred.task,
        selection,
        &x,
        &ckpt.lrp,
    )?;
    let mut ranked: Vec<(usize, f64)> = features.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| {
        b.1.abs()
            .partial_cmp(&a.1.abs())
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let _ = writeln!(report, "top signature features (layer, unit, relevance):");
    for (idx, value) in ranked.iter().take(10) {
        let n = selection.neurons[*idx];
        let _ = writeln!(report, "  layer {} unit {}: {}", n.layer, n.unit, value);
    }

    // Input heatmap through the chosen task's subnetwork.
    let mask = submodel_mask(&ckpt.freeze, pred.task)?;
    let (logits, trace) = ckpt.network.forward_masked(&x, pred.task, Some(&mask))?;
    let class = argmax(logits.values());
    let rmap = backpropagate_relevance(&ckpt.network, &trace, pred.task, class, &ckpt.lrp)?;
    let heat = input_heatmap(&rmap, ckpt.network.input_shape())?;
    write_heatmap_pgm(&out.join("heatmap.pgm"), &heat)?;
    let _ = writeln!(report, "heatmap: heatmap.pgm");

    fs::write(out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn heatmap(
    checkpoint: &Path,
    sample: &Path,
    out: &Path,
    task: Option<usize>,
    class: Option<usize>,
    overwrite: bool,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let x = read_sample(sample, &ckpt)?;
    prepare_out(out, overwrite)?;

    let task = match task {
        Some(t) => t,
        None => match &ckpt.chain {
            Some(chain) => {
                predict(&ckpt.network, &ckpt.freeze, chain, &ckpt.selections, &x, &ckpt.lrp)?.task
            }
            None if ckpt.network.heads().len() == 1 => {
                *ckpt.network.heads().keys().next().unwrap()
            }
            None => {
                return Err(Error::Input(
                    "no chain to infer the task; pass --task".into(),
                ))
            }
        },
    };
    let frozen = ckpt.freeze.history().iter().any(|(t, _)| *t == task);
    let mask = if frozen {
        Some(submodel_mask(&ckpt.freeze, task)?)
    } else {
        None
    };
    let (logits, trace) = ckpt.network.forward_masked(&x, task, mask.as_ref())?;
    let class = class.unwrap_or_else(|| argmax(logits.values()));
    let rmap = backpropagate_relevance(&ckpt.network, &trace, task, class, &ckpt.lrp)?;
    let heat = input_heatmap(&rmap, ckpt.network.input_shape())?;
    write_heatmap_pgm(&out.join("heatmap.pgm"), &heat)?;
    write_heatmap_csv(&out.join("heatmap.csv"), &heat)?;
    println!(
        "wrote heatmap.pgm and heatmap.csv for task {task} class {class} in {}",
        out.display()
    );
    Ok(())
}

fn budget(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = load_config(config, overrides, None)?;
    let b = MemoryBudget {
        n_f: cfg.memory.n_f,
        n_r: representatives_needed(cfg.schedule.len()),
        s: cfg.memory.exemplars_per_class,
        reference: cfg.memory.reference.iter().product(),
    };
    let report = check_budget(&b);
    println!("{report}");
    if !report.ok {
        return Err(Error::BudgetViolation(report.to_string()));
    }
    Ok(())
}

fn metrics(out: &Path) -> Result<()> {
    let table = read_metrics_csv(&out.join("metrics.csv"))?;
    let t = table.tasks();
    let a_taw = average_accuracy(&table.taw, t - 1)?;
    let a_tag = average_accuracy(&table.tag, t - 1)?;
    let (f_taw, f_tag) = if t >= 2 {
        (Some(forgetting(&table.taw, t)?), Some(forgetting(&table.tag, t)?))
    } else {
        (None, None)
    };
    println!("tasks: {t}");
    println!("A_taw: {a_taw}");
    println!("A_tag: {a_tag}");
    match (f_taw, f_tag) {
        (Some(fw), Some(fg)) => {
            println!("F_taw: {fw}");
            println!("F_tag: {fg}");
        }
        _ => println!("forgetting: undefined for a single task"),
    }

    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() {
        let v: Value = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let r = &v["result"];
        if !r.is_null() {
            check_manifest(r, "final_taw", a_taw)?;
            check_manifest(r, "final_tag", a_tag)?;
            if let Some(fw) = f_taw {
                check_manifest(r, "forgetting_taw", fw)?;
            }
            if let Some(fg) = f_tag {
                check_manifest(r, "forgetting_tag", fg)?;
            }
            println!("manifest agrees with metrics CSV");
        }
    }
    Ok(())
}

fn check_manifest(result: &Value, field: &str, recomputed: f64) -> Result<()> {
    let stored = result[field]
        .as_f64()
        .ok_or_else(|| Error::Consistency(format!("manifest misses {field}")))?;
    if stored != recomputed {
        return Err(Error::Consistency(format!(
            "manifest {field} {stored} disagrees with metrics CSV {recomputed}"
        )));
    }
    Ok(())
}
