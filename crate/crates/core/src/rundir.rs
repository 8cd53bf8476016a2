//! Run directory layout, writers and the post-run report.
//!
//! ```text
//! run.json                 resolved configuration
//! pool_history.csv         event,candidate_id,action,distance,val_loss
//! spectra/reference.csv    dense reference spectrum
//! spectra/c007_006.csv     candidate 7 after epoch 6 (index,lambda)
//! embedding_<event>.csv    candidate_id,epoch,x,y,distance_to_reference
//! metrics/c007.csv         epoch,train_loss,val_loss,val_ppl
//! best.ckpt                best survivor's checkpoint
//! report.json              outcome and accounting (no wall-clock data)
//! timing.json              wall-clock durations
//! ```

use crate::error::{Error, Result};
use crate::lyapunov::write_spectrum_csv;
use crate::search::SearchReport;
use crate::training::{append_metrics, EpochMetrics};
use serde::Serialize;
use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

pub const LOCK_FILE: &str = ".lock";

/// One row of `pool_history.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct PoolHistoryRow {
    pub event: usize,
    pub candidate_id: usize,
    pub action: PoolAction,
    pub distance: Option<f64>,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolAction {
    Kept,
    Removed,
    Generated,
    Failed,
}

/// One row of an `embedding_<event>.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EmbeddingRow {
    /// Candidate id, or `reference`.
    pub candidate_id: String,
    pub epoch: usize,
    pub x: f64,
    pub y: f64,
    pub distance_to_reference: f64,
}

pub struct RunDir {
    root: PathBuf,
    history: Vec<PoolHistoryRow>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> Error + '_ {
    move |e| Error::Csv {
        context: path.display().to_string(),
        source: e,
    }
}

pub fn candidate_name(id: usize) -> String {
    format!("c{id:03}")
}

impl RunDir {
    /// Prepares `root`, deleting artifacts left by an earlier run there.
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["spectra", "metrics", "report"] {
            let p = root.join(sub);
            if p.is_dir() {
                std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
        if let Ok(entries) = std::fs::read_dir(root) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().into_owned();
                let stale = matches!(name.as_str(), "pool_history.csv" | "report.json" | "timing.json" | "best.ckpt")
                    || name.starts_with("embedding_") && name.ends_with(".csv");
                if stale {
                    std::fs::remove_file(entry.path()).map_err(io_err(&entry.path()))?;
                }
            }
        }
        for sub in ["spectra", "metrics"] {
            let p = root.join(sub);
            std::fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            history: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.root.join(name), value)
    }

    pub fn write_reference_spectrum(&self, exponents: &[f64]) -> Result<()> {
        write_spectrum_csv(&self.root.join("spectra").join("reference.csv"), exponents)
    }

    pub fn write_candidate_spectrum(&self, id: usize, epoch: usize, exponents: &[f64]) -> Result<()> {
        let name = format!("{}_{epoch:03}.csv", candidate_name(id));
        write_spectrum_csv(&self.root.join("spectra").join(name), exponents)
    }

    pub fn append_metrics(&self, id: usize, m: &EpochMetrics) -> Result<()> {
        append_metrics(&self.root.join("metrics").join(format!("{}.csv", candidate_name(id))), m)
    }

    pub fn write_embedding(&self, event: usize, rows: &[EmbeddingRow]) -> Result<()> {
        write_csv(&self.root.join(format!("embedding_{event}.csv")), rows)
    }

    /// Appends rows and rewrites `pool_history.csv`.
    pub fn record_pool(&mut self, rows: impl IntoIterator<Item = PoolHistoryRow>) -> Result<()> {
        self.history.extend(rows);
        write_csv(&self.root.join("pool_history.csv"), &self.history)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a CSV with a header, rejecting rows whose column count differs.
pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(path)
        .map_err(csv_err(path))?;
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

/// Exclusive ownership of a run directory for the life of the value.
pub struct DirLock {
    path: PathBuf,
    _file: File,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::InvalidArgument(format!(
                        "{} is locked by another process (remove {} if it is stale)",
                        dir.display(),
                        path.display()
                    ))
                } else {
                    Error::io(path.display().to_string(), e)
                }
            })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Distance (or loss) trajectory point of one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct TrajectoryRow {
    pub candidate_id: usize,
    pub event: usize,
    pub epoch: usize,
    pub distance: Option<f64>,
    pub val_loss: f64,
}

/// Best validation perplexity reached within a cumulative epoch budget.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct BudgetRow {
    pub stage: String,
    pub epochs_consumed: usize,
    pub best_val_ppl: f64,
    pub best_candidate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ReportSummary {
    pub trajectories: usize,
    pub budget_rows: usize,
    pub best_candidate: Option<usize>,
}

/// Files every finished run directory holds.
pub fn missing_artifacts(dir: &Path) -> Vec<String> {
    let mut missing: Vec<String> = ["run.json", "pool_history.csv", "report.json"]
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .map(String::from)
        .collect();
    if let Ok(report) = read_report(dir) {
        if report.uses_spectra {
            if !dir.join("spectra/reference.csv").is_file() {
                missing.push("spectra/reference.csv".into());
            }
            for e in &report.events {
                let name = format!("embedding_{}.csv", e.event);
                if !dir.join(&name).is_file() {
                    missing.push(name);
                }
            }
        }
    }
    missing
}

pub fn read_report(dir: &Path) -> Result<SearchReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

/// Writes `report/trajectories/c###.csv` (one row per measurement event of
/// that candidate) and `report/budget.csv`.
pub fn emit_report(dir: &Path) -> Result<ReportSummary> {
    let missing = missing_artifacts(dir);
    if !missing.is_empty() {
        return Err(Error::IncompleteArtifact {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let report = read_report(dir)?;
    let out = dir.join("report");
    let traj_dir = out.join("trajectories");
    std::fs::create_dir_all(&traj_dir).map_err(io_err(&traj_dir))?;

    let mut trajectories = 0;
    for c in &report.candidates {
        let rows: Vec<TrajectoryRow> = c
            .measurements
            .iter()
            .map(|m| TrajectoryRow {
                candidate_id: c.id,
                event: m.event,
                epoch: m.epoch,
                distance: m.distance,
                val_loss: m.val_loss,
            })
            .collect();
        write_csv(&traj_dir.join(format!("{}.csv", candidate_name(c.id))), &rows)?;
        trajectories += 1;
    }

    let budget = report.budget_table();
    write_csv(&out.join("budget.csv"), &budget)?;
    write_json(&out.join("best.json"), &report.best)?;
    Ok(ReportSummary {
        trajectories,
        budget_rows: budget.len(),
        best_candidate: report.best.as_ref().map(|b| b.id),
    })
}
