//! Run directories, the run index and CSV/JSON report tables.
//!
//! Layout under an output directory:
//! `runs/<id>/metrics.json`, `runs/<id>/checkpoint.json`, `runs/index.csv`
//! and `reports/<name>.{csv,json}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use compt_core::analysis::{CrossTaskResult, InclusionReport, IsolationReport, LrCell, WeightReport};
use compt_core::checkpoint::PromptCheckpoint;
use compt_core::train::SweepReport;
use compt_core::{MetricsRecord, TrainConfig};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::files::{save_checkpoint, write_json};

/// Identifier of a run: method, source count, shots and seed.
pub fn run_id(config: &TrainConfig) -> String {
    format!(
        "{}-m{}-k{}-s{}",
        config.method.as_str(),
        config.num_sources,
        config.k_shot,
        config.seed
    )
}

pub fn run_dir(out: &Path, id: &str) -> PathBuf {
    out.join("runs").join(id)
}

pub fn report_path(out: &Path, name: &str, ext: &str) -> PathBuf {
    out.join("reports").join(format!("{name}.{ext}"))
}

/// The metrics document with the wall-clock field removed, for comparing runs.
pub fn metrics_without_timing(metrics: &MetricsRecord) -> Result<String> {
    let mut value = serde_json::to_value(metrics).map_err(|e| Error::parse("metrics", e))?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("wall_clock_secs");
    }
    serde_json::to_string_pretty(&value).map_err(|e| Error::parse("metrics", e))
}

/// Writes `metrics.json` and `checkpoint.json`, then updates the run index.
pub fn save_run(out: &Path, metrics: &MetricsRecord, checkpoint: &PromptCheckpoint) -> Result<PathBuf> {
    let id = run_id(&metrics.config);
    let dir = run_dir(out, &id);
    write_json(&dir.join("metrics.json"), metrics)?;
    save_checkpoint(&dir.join("checkpoint.json"), checkpoint)?;
    update_index(out, &id, metrics)?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct IndexRow {
    pub run_id: String,
    pub method: String,
    #[serde(rename = "M")]
    pub num_sources: usize,
    pub k: usize,
    pub seed: u64,
    pub avg_acc: f64,
}

pub fn index_path(out: &Path) -> PathBuf {
    out.join("runs").join("index.csv")
}

pub fn read_index(out: &Path) -> Result<Vec<IndexRow>> {
    let path = index_path(out);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_path(&path).map_err(|e| Error::parse(&path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::parse(&path, e)))
        .collect()
}

/// Inserts or replaces the row for `id`; rows stay sorted by run id.
pub fn update_index(out: &Path, id: &str, metrics: &MetricsRecord) -> Result<()> {
    let mut rows: BTreeMap<String, IndexRow> = read_index(out)?.into_iter().map(|r| (r.run_id.clone(), r)).collect();
    rows.insert(
        id.into(),
        IndexRow {
            run_id: id.into(),
            method: metrics.config.method.as_str().into(),
            num_sources: if metrics.config.method.uses_sources() { metrics.config.num_sources } else { 0 },
            k: metrics.config.k_shot,
            seed: metrics.seed,
            avg_acc: metrics.average_test,
        },
    );
    write_csv_rows(&index_path(out), rows.values())
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_csv_rows<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a table given as a header and string records.
pub fn write_csv_table(path: &Path, header: &[String], records: &[Vec<String>]) -> Result<()> {
    create_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    w.write_record(header).map_err(|e| Error::parse(path, e))?;
    for r in records {
        w.write_record(r).map_err(|e| Error::parse(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `reports/<name>.json` and `reports/<name>.csv`.
pub fn write_report<T: Serialize>(out: &Path, name: &str, value: &T, header: &[String], records: &[Vec<String>]) -> Result<()> {
    write_json(&report_path(out, name, "json"), value)?;
    write_csv_table(&report_path(out, name, "csv"), header, records)
}

fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

pub fn isolation_table(report: &IsolationReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["task".to_string()];
    header.extend(report.columns.iter().cloned());
    let records = report
        .accuracy
        .iter()
        .map(|(task, row)| {
            let mut r = vec![task.clone()];
            r.extend(report.columns.iter().map(|c| row[c].to_string()));
            r
        })
        .collect();
    (header, records)
}

pub fn weight_table(report: &WeightReport) -> (Vec<String>, Vec<Vec<String>>) {
    let records = report
        .rows
        .iter()
        .flat_map(|row| {
            row.weights.iter().enumerate().map(move |(s, w)| {
                vec![row.task.clone(), s.to_string(), row.logits[s].to_string(), w.to_string()]
            })
        })
        .collect();
    (strings(["task", "source", "logit", "weight"]), records)
}

pub fn cross_table(result: &CrossTaskResult) -> (Vec<String>, Vec<Vec<String>>) {
    let records = result
        .confusion
        .iter()
        .map(|(g, p, c)| vec![g.to_string(), p.to_string(), c.to_string()])
        .collect();
    (strings(["gold", "predicted", "count"]), records)
}

pub fn lr_table(cells: &[LrCell]) -> (Vec<String>, Vec<Vec<String>>) {
    let records = cells
        .iter()
        .map(|c| vec![c.lr_private.to_string(), c.epochs.to_string(), c.average_test.to_string()])
        .collect();
    (strings(["lr_private", "epochs", "average_test"]), records)
}

pub fn inclusion_table(report: &InclusionReport) -> (Vec<String>, Vec<Vec<String>>) {
    let records = report
        .base_tasks
        .iter()
        .map(|t| {
            let (w, x) = (report.without[t], report.with[t]);
            vec![
                t.clone(),
                report.relatives.contains(t).to_string(),
                w.mean.to_string(),
                w.std.to_string(),
                x.mean.to_string(),
                x.std.to_string(),
            ]
        })
        .collect();
    (
        strings(["task", "relative", "without_mean", "without_std", "with_mean", "with_std"]),
        records,
    )
}

/// One row per task plus an `average` row.
pub fn sweep_table(label: &str, sweeps: &[(String, SweepReport)]) -> (Vec<String>, Vec<Vec<String>>) {
    let mut records = Vec::new();
    for (key, sweep) in sweeps {
        for (task, stat) in &sweep.per_task {
            records.push(vec![key.clone(), task.clone(), stat.mean.to_string(), stat.std.to_string()]);
        }
        records.push(vec![
            key.clone(),
            "average".into(),
            sweep.average.mean.to_string(),
            sweep.average.std.to_string(),
        ]);
    }
    (vec![label.to_string(), "task".into(), "mean".into(), "std".into()], records)
}
