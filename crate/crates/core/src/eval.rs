//! F1 scoring, seed aggregation and comparison tables.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EvalRecord, Label};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("length mismatch: {preds} predictions vs {golds} gold labels")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("ragged grid, missing cells: {}", .0.join(", "))]
    Ragged(Vec<String>),
    #[error("duplicate record for method {method:?} on task {task:?}")]
    Duplicate { method: String, task: String },
}

/// Binary confusion counts for one positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn count(preds: &[Label], golds: &[Label], positive: Label) -> Result<Self, EvalError> {
        if preds.len() != golds.len() {
            return Err(EvalError::LengthMismatch {
                preds: preds.len(),
                golds: golds.len(),
            });
        }
        let mut c = Confusion::default();
        for (p, g) in preds.iter().zip(golds) {
            match (*p == positive, *g == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    /// F1 on the positive class; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        if self.tp == 0 {
            return 0.0;
        }
        let tp = self.tp as f64;
        let precision = tp / (tp + self.fp as f64);
        let recall = tp / (tp + self.fn_ as f64);
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn f1_score(preds: &[Label], golds: &[Label], positive: Label) -> Result<f64, EvalError> {
    if golds.is_empty() && preds.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(Confusion::count(preds, golds, positive)?.f1())
}

/// Mean and sample standard deviation (n - 1 divisor, 0 for a single run).
pub fn aggregate_runs(per_seed: &[f64]) -> Result<(f64, f64), EvalError> {
    if per_seed.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = per_seed.len() as f64;
    let mean = per_seed.iter().sum::<f64>() / n;
    if per_seed.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss: f64 = per_seed.iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Outcome of scoring predictions where some replies failed to parse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRun {
    pub f1: f64,
    pub confusion: Confusion,
    pub parse_failures: usize,
}

/// Scores `preds`, counting `None` (unparseable reply) as a negative prediction.
pub fn score_with_failures(preds: &[Option<Label>], golds: &[Label], positive: Label) -> Result<ScoredRun, EvalError> {
    let negative = positive.opposite();
    let filled: Vec<Label> = preds.iter().map(|p| p.unwrap_or(negative)).collect();
    let confusion = Confusion::count(&filled, golds, positive)?;
    if filled.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(ScoredRun {
        f1: confusion.f1(),
        confusion,
        parse_failures: preds.iter().filter(|p| p.is_none()).count(),
    })
}

/// `mean ± std` on the percent scale with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", mean * 100.0, std * 100.0)
}

/// Which task columns belong to which culture. Each group gets an average
/// column after its tasks.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableLayout {
    pub groups: Vec<(String, Vec<String>)>,
}

impl TableLayout {
    /// One group holding every task in first-seen order.
    pub fn single(records: &[EvalRecord], name: &str) -> Self {
        let mut tasks: Vec<String> = Vec::new();
        for r in records {
            if !tasks.contains(&r.task_id) {
                tasks.push(r.task_id.clone());
            }
        }
        Self {
            groups: vec![(name.to_string(), tasks)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComparisonTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_text(&self) -> String {
        let cols = self.header.len();
        let width = |i: usize| {
            std::iter::once(&self.header)
                .chain(&self.rows)
                .map(|r| r[i].chars().count())
                .max()
                .unwrap_or(0)
        };
        let widths: Vec<usize> = (0..cols).map(width).collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let pad = widths[i] - c.chars().count();
                    if i == 0 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

/// Builds the method x task grid. Average cells aggregate per-seed means of
/// the group's tasks when all have the same seed count; otherwise they show
/// the mean of task means without a deviation.
pub fn emit_comparison(records: &[EvalRecord], layout: &TableLayout) -> Result<ComparisonTable, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let layout = if layout.groups.is_empty() {
        TableLayout::single(records, "")
    } else {
        layout.clone()
    };

    let mut methods: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(&str, &str), &EvalRecord> = BTreeMap::new();
    for r in records {
        if !methods.contains(&r.method_name) {
            methods.push(r.method_name.clone());
        }
        if cells.insert((&r.method_name, &r.task_id), r).is_some() {
            return Err(EvalError::Duplicate {
                method: r.method_name.clone(),
                task: r.task_id.clone(),
            });
        }
    }

    let missing: Vec<String> = methods
        .iter()
        .flat_map(|m| {
            layout
                .groups
                .iter()
                .flat_map(|(_, tasks)| tasks.iter())
                .filter(|t| !cells.contains_key(&(m.as_str(), t.as_str())))
                .map(move |t| format!("{m}/{t}"))
        })
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::Ragged(missing));
    }

    let mut header = vec!["Method".to_string()];
    for (group, tasks) in &layout.groups {
        header.extend(tasks.iter().cloned());
        header.push(if group.is_empty() { "Avg".to_string() } else { format!("{group} Avg") });
    }

    let mut rows = Vec::new();
    for m in &methods {
        let mut row = vec![m.clone()];
        for (_, tasks) in &layout.groups {
            let recs: Vec<&EvalRecord> = tasks.iter().map(|t| cells[&(m.as_str(), t.as_str())]).collect();
            row.extend(recs.iter().map(|r| format_cell(r.mean, r.std)));
            row.push(average_cell(&recs));
        }
        rows.push(row);
    }
    Ok(ComparisonTable { header, rows })
}

fn average_cell(recs: &[&EvalRecord]) -> String {
    if recs.is_empty() {
        return String::new();
    }
    let seeds = recs[0].per_seed_f1.len();
    if seeds > 0 && recs.iter().all(|r| r.per_seed_f1.len() == seeds) {
        let per_seed: Vec<f64> = (0..seeds)
            .map(|i| recs.iter().map(|r| r.per_seed_f1[i]).sum::<f64>() / recs.len() as f64)
            .collect();
        let (mean, std) = aggregate_runs(&per_seed).expect("non-empty");
        format_cell(mean, std)
    } else {
        let mean = recs.iter().map(|r| r.mean).sum::<f64>() / recs.len() as f64;
        format!("{:.2}", mean * 100.0)
    }
}
