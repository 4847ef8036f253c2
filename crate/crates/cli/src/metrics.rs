//! Episode exports: per-tick CSV, summary JSON, trajectory and chunk JSONL.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::runner::{EpisodeMetrics, TickMetrics};

pub const CSV_HEADER: &str = "tick,time_s,ee_err_m,base_dev_m,f_int_N,h_min_m";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Files written for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub metrics_csv: PathBuf,
    pub summary_json: PathBuf,
    pub trajectory_jsonl: PathBuf,
    pub chunks_jsonl: PathBuf,
}

impl ExportPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            metrics_csv: dir.join("metrics.csv"),
            summary_json: dir.join("summary.json"),
            trajectory_jsonl: dir.join("trajectory.jsonl"),
            chunks_jsonl: dir.join("chunks.jsonl"),
        }
    }
}

/// Fixed-precision CSV so that identical runs give identical bytes.
pub fn metrics_csv(rows: &[TickMetrics]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.tick, r.time_s, r.ee_err_m, r.base_dev_m, r.f_int_n, r.h_min_m
        );
    }
    s
}

fn jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<String, ExportError> {
    let mut s = String::new();
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| ExportError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        s.push_str(&line);
        s.push('\n');
    }
    Ok(s)
}

fn write(path: &Path, contents: &str) -> Result<(), ExportError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| ExportError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Overwrites every file in `paths`; nothing is appended.
pub fn export_metrics(metrics: &EpisodeMetrics, paths: &ExportPaths) -> Result<(), ExportError> {
    write(&paths.metrics_csv, &metrics_csv(&metrics.ticks))?;
    let summary =
        serde_json::to_string_pretty(&metrics.summary).map_err(|source| ExportError::Json {
            path: paths.summary_json.clone(),
            source,
        })?;
    write(&paths.summary_json, &(summary + "\n"))?;
    write(
        &paths.trajectory_jsonl,
        &jsonl(&metrics.trajectory, &paths.trajectory_jsonl)?,
    )?;
    write(
        &paths.chunks_jsonl,
        &jsonl(&metrics.chunks, &paths.chunks_jsonl)?,
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_episode_is_header_only() {
        assert_eq!(metrics_csv(&[]), format!("{CSV_HEADER}\n"));
    }
}
