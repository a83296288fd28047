//! Continual-learning metrics: the lower-triangular accuracy matrix a_{t,i}
//! (accuracy on task i after training task t), average accuracy over a row,
//! and forgetting (peak minus final accuracy, averaged over old tasks).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular accuracy matrix in percentage points; row t holds
/// a_{t,0..=t}.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> AccuracyMatrix {
        AccuracyMatrix { rows: Vec::new() }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<AccuracyMatrix> {
        let mut m = AccuracyMatrix::new();
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append row t (must hold exactly t+1 cells, values in [0,100]).
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::dim(format!(
                "row {} must hold {} cells, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if row.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(Error::Input(format!("accuracy outside [0,100]: {row:?}")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// A_t: mean accuracy over tasks 0..=t after learning task t.
pub fn average_accuracy(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    let row = m
        .rows
        .get(t)
        .ok_or_else(|| Error::Input(format!("row {t} not recorded yet")))?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// F over `tasks` completed tasks: mean over old tasks i of
/// (max_t a_{t,i}) - a_{last,i}. Undefined below 2 tasks.
pub fn forgetting(m: &AccuracyMatrix, tasks: usize) -> Result<f64> {
    if tasks < 2 {
        return Err(Error::UndefinedMetric(format!(
            "forgetting needs >= 2 tasks, got {tasks}"
        )));
    }
    if tasks > m.rows.len() {
        return Err(Error::Input(format!(
            "forgetting over {} tasks but only {} rows recorded",
            tasks,
            m.rows.len()
        )));
    }
    let last = tasks - 1;
    let mut sum = 0.0;
    for i in 0..last {
        let peak = (i..=last)
            .map(|t| m.rows[t][i])
            .fold(f64::NEG_INFINITY, f64::max);
        sum += peak - m.rows[last][i];
    }
    Ok(sum / last as f64)
}

/// Both evaluation variants plus the saturation trace.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsTable {
    pub taw: AccuracyMatrix,
    pub tag: AccuracyMatrix,
    /// Available (unfrozen) neuron fraction after each task.
    pub available: Vec<f64>,
}

impl MetricsTable {
    pub fn tasks(&self) -> usize {
        self.taw.tasks()
    }
}

/// One row per recorded cell: t, i, acc_taw, acc_tag, available_fraction
/// (the fraction column repeats row t's value on every cell of that row).
pub fn write_metrics_csv(path: &Path, table: &MetricsTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "i", "acc_taw", "acc_tag", "available_fraction"])
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    for t in 0..table.tasks() {
        for i in 0..=t {
            let taw = table.taw.get(t, i).ok_or_else(|| miss(t, i))?;
            let tag = table.tag.get(t, i).ok_or_else(|| miss(t, i))?;
            let avail = table.available.get(t).copied().unwrap_or(1.0);
            w.write_record([
                t.to_string(),
                i.to_string(),
                format!("{taw}"),
                format!("{tag}"),
                format!("{avail}"),
            ])
            .map_err(|e| Error::Format(format!("csv: {e}")))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn miss(t: usize, i: usize) -> Error {
    Error::Consistency(format!("metrics cell ({t},{i}) missing"))
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(format!("csv: {e}")))?
        .clone();
    let expect = ["t", "i", "acc_taw", "acc_tag", "available_fraction"];
    if header.iter().collect::<Vec<_>>() != expect {
        return Err(Error::Format(format!(
            "metrics CSV header {:?}, expected {:?}",
            header, expect
        )));
    }
    let mut cells: Vec<(usize, usize, f64, f64, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(format!("csv: {e}")))?;
        let parse_u = |s: &str| -> Result<usize> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad index {s:?}")))
        };
        let parse_f = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad value {s:?}")))
        };
        cells.push((
            parse_u(&rec[0])?,
            parse_u(&rec[1])?,
            parse_f(&rec[2])?,
            parse_f(&rec[3])?,
            parse_f(&rec[4])?,
        ));
    }
    if cells.is_empty() {
        return Err(Error::Consistency("metrics CSV holds no rows".into()));
    }
    let tasks = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let mut taw = vec![Vec::new(); tasks];
    let mut tag = vec![Vec::new(); tasks];
    let mut available = vec![1.0; tasks];
    for t in 0..tasks {
        for i in 0..=t {
            let cell = cells
                .iter()
                .find(|c| c.0 == t && c.1 == i)
                .ok_or_else(|| miss(t, i))?;
            taw[t].push(cell.2);
            tag[t].push(cell.3);
            available[t] = cell.4;
        }
    }
    Ok(MetricsTable {
        taw: AccuracyMatrix::from_rows(taw)?,
        tag: AccuracyMatrix::from_rows(tag)?,
        available,
    })
}
