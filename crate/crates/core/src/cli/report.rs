//! Aggregation of finished runs into accuracy tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{self, EpochMetrics};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_FILE: &str = "run.json";

/// Identity of one run, stored next to its metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub variant: String,
    pub task: String,
    pub seed: u64,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub task: String,
    pub seed: u64,
    pub accuracy: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

/// Population standard deviation; 0 for a single value.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ReportTable {
    /// One row per run with the mean and std of its (variant, task) group.
    /// Rows are ordered by variant, task and seed.
    pub fn from_runs(runs: &[(RunInfo, f64)]) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<(u64, f64)>> = BTreeMap::new();
        for (info, acc) in runs {
            groups
                .entry((info.variant.clone(), info.task.clone()))
                .or_default()
                .push((info.seed, *acc));
        }
        let mut rows = Vec::new();
        for ((variant, task), mut entries) in groups {
            entries.sort_by_key(|e| e.0);
            let accs: Vec<f64> = entries.iter().map(|e| e.1).collect();
            let (mean, std) = mean_std(&accs);
            rows.extend(entries.into_iter().map(|(seed, accuracy)| ReportRow {
                variant: variant.clone(),
                task: task.clone(),
                seed,
                accuracy,
                mean,
                std,
            }));
        }
        Self { rows }
    }

    /// Per-group `(variant, task, mean, std, seeds)`.
    pub fn summary(&self) -> Vec<(String, String, f64, f64, usize)> {
        let mut out: Vec<(String, String, f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.variant && last.1 == r.task => last.4 += 1,
                _ => out.push((r.variant.clone(), r.task.clone(), r.mean, r.std, 1)),
            }
        }
        out
    }

    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant).map(|r| r.mean)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Numeric(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Numeric(format!("{}: {e}", path.display())))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Fixed-width text table of accuracies in percent.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:<16} {:>6} {:>9} {:>8} {:>7}", "variant", "task", "seed", "acc(%)", "mean(%)", "std");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:<16} {:>6} {:>9.2} {:>8.2} {:>7.2}",
                r.variant,
                r.task,
                r.seed,
                100.0 * r.accuracy,
                100.0 * r.mean,
                100.0 * r.std
            );
        }
        s
    }
}

/// Every directory under `root` (inclusive) holding a metrics log.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if dir == root => return Err(Error::io(root, e)),
            Err(_) => continue,
        };
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == METRICS_FILE) {
                found.push(dir.clone());
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn read_run(dir: &Path) -> Result<(RunInfo, Vec<EpochMetrics>)> {
    let info_path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&info_path).map_err(|e| Error::io(&info_path, e))?;
    let info: RunInfo = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: info_path,
        source: e,
    })?;
    let metrics = trainer::read_metrics_csv(&dir.join(METRICS_FILE))?;
    Ok((info, metrics))
}

/// Final-epoch target accuracy of every run below `root`.
pub fn collect(root: &Path) -> Result<ReportTable> {
    let dirs = find_runs(root)?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no metric logs found under {}", root.display())));
    }
    let mut runs = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let (info, metrics) = read_run(&dir)?;
        let last = metrics
            .last()
            .ok_or_else(|| Error::Format { row: 0, message: format!("{}: empty metrics log", dir.display()) })?;
        runs.push((info, last.acc_target));
    }
    Ok(ReportTable::from_runs(&runs))
}
