//! Ranking of finished runs at a matched communication budget.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use log::warn;

use crate::diagnostics::{parse_metrics_csv, MeanStd, RoundMetrics};
use crate::error::{Error, Result};

use super::runner::SummaryFile;

/// One run's metric rows under a display label (usually the algorithm).
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub label: String,
    pub seed: u64,
    pub rows: Vec<RoundMetrics>,
}

/// A run cut at the shared budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPoint {
    /// Iterations completed within the budget.
    pub rounds: usize,
    pub uploads: usize,
    pub loss: f64,
    pub grad_norm2: f64,
    pub accuracy: Option<f64>,
}

/// Last state of `rows` reachable with at most `budget` uploads.
pub fn align(rows: &[RoundMetrics], budget: usize) -> Option<AlignedPoint> {
    let idx = rows.iter().rposition(|r| r.uploads <= budget)?;
    let r = &rows[idx];
    Some(AlignedPoint {
        rounds: r.t,
        uploads: r.uploads,
        loss: r.loss,
        grad_norm2: r.grad_norm2,
        accuracy: rows[..=idx].iter().rev().find_map(|r| r.accuracy),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub label: String,
    pub rank: usize,
    pub tied: bool,
    pub runs: usize,
    pub rounds: MeanStd,
    pub loss: MeanStd,
    pub grad_norm2: MeanStd,
    pub accuracy: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Matched upload budget per seed.
    pub budgets: BTreeMap<u64, usize>,
    /// Some run had a larger budget than another run of its seed and was truncated.
    pub aligned: bool,
    /// `true` when ranked by accuracy, otherwise by loss.
    pub by_accuracy: bool,
    pub table: Vec<Ranked>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let key = if self.by_accuracy { "accuracy" } else { "loss" };
        let budgets: Vec<String> = self.budgets.iter().map(|(s, b)| format!("seed {s}: {b}")).collect();
        let _ = writeln!(out, "upload budgets ({}), ranked by {key}", budgets.join(", "));
        let _ = writeln!(
            out,
            "rank  algorithm       runs  rounds   final_loss             grad_norm2             accuracy"
        );
        for r in &self.table {
            let acc = r.accuracy.map_or("-".to_string(), |a| format!("{:.4} ± {:.4}", a.mean, a.std));
            let _ = writeln!(
                out,
                "{:<5} {:<15} {:<5} {:<8.1} {:<22} {:<22} {}{}",
                r.rank,
                r.label,
                r.runs,
                r.rounds.mean,
                format!("{:.6e} ± {:.1e}", r.loss.mean, r.loss.std),
                format!("{:.6e} ± {:.1e}", r.grad_norm2.mean, r.grad_norm2.std),
                acc,
                if r.tied { "  (tie)" } else { "" }
            );
        }
        out
    }
}

/// Rank labels after cutting every run at the smallest total upload count
/// among the runs of its seed.
pub fn compare_runs(traces: &[RunTrace]) -> Result<Comparison> {
    if traces.is_empty() {
        return Err(Error::config("nothing to compare"));
    }
    let mut budgets: BTreeMap<u64, usize> = BTreeMap::new();
    let mut aligned = false;
    for t in traces {
        let total =
            t.rows.last().map(|r| r.uploads).ok_or_else(|| Error::config(format!("run {} is empty", t.label)))?;
        let b = budgets.entry(t.seed).or_insert(total);
        aligned |= *b != total;
        *b = (*b).min(total);
    }
    if aligned {
        warn!("runs of the same seed have different upload budgets; truncating to the smallest");
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<&str, Vec<AlignedPoint>> = BTreeMap::new();
    for t in traces {
        let point = align(&t.rows, budgets[&t.seed]).expect("budget reaches the first row");
        if !groups.contains_key(t.label.as_str()) {
            order.push(&t.label);
        }
        groups.entry(&t.label).or_default().push(point);
    }
    let by_accuracy = groups.values().flatten().all(|p| p.accuracy.is_some());
    let mut table: Vec<Ranked> = order
        .iter()
        .map(|&label| {
            let pts = &groups[label];
            let stat = |f: &dyn Fn(&AlignedPoint) -> f64| MeanStd::of(&pts.iter().map(f).collect::<Vec<_>>()).unwrap();
            Ranked {
                label: label.to_string(),
                rank: 0,
                tied: false,
                runs: pts.len(),
                rounds: stat(&|p| p.rounds as f64),
                loss: stat(&|p| p.loss),
                grad_norm2: stat(&|p| p.grad_norm2),
                accuracy: by_accuracy.then(|| stat(&|p| p.accuracy.unwrap())),
            }
        })
        .collect();
    // higher is better for accuracy, lower for loss
    let score = |r: &Ranked| if by_accuracy { -r.accuracy.unwrap().mean } else { r.loss.mean };
    table.sort_by(|a, b| score(a).total_cmp(&score(b)));
    for i in 0..table.len() {
        let tied_prev = i > 0 && score(&table[i]) == score(&table[i - 1]);
        table[i].rank = if tied_prev { table[i - 1].rank } else { i + 1 };
        if tied_prev {
            table[i].tied = true;
            table[i - 1].tied = true;
        }
    }
    Ok(Comparison { budgets, aligned, by_accuracy, table })
}

/// Load every run listed in the given `summary.txt` files. Labels carry a
/// `#k` suffix (k = file position) when more than one file is given.
pub fn load_traces(summaries: &[&Path]) -> Result<Vec<RunTrace>> {
    let mut traces = Vec::new();
    for (k, path) in summaries.iter().enumerate() {
        let file = SummaryFile::load(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for run in &file.run {
            if run.summary.failure.is_some() {
                warn!("skipping failed run {}", run.csv);
                continue;
            }
            let text = std::fs::read_to_string(dir.join(&run.csv))?;
            let label = if summaries.len() > 1 {
                format!("{}#{}", run.summary.algorithm, k + 1)
            } else {
                run.summary.algorithm.clone()
            };
            traces.push(RunTrace { label, seed: run.summary.seed, rows: parse_metrics_csv(&text)? });
        }
    }
    Ok(traces)
}
