//! Append-only JSON-lines metrics log and its table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn new(stage: &str, epoch: usize, values: impl IntoIterator<Item = (String, f64)>) -> Self {
        MetricsRecord {
            stage: stage.to_string(),
            epoch,
            values: values.into_iter().collect(),
        }
    }
}

pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        MetricsLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serializes");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(&self) -> Result<Vec<MetricsRecord>> {
        read_metrics(&self.path)
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "metrics log".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Integrity {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })
        })
        .collect()
}

/// One plain-text table per stage, rows in log order, columns sorted.
pub fn render_table(records: &[MetricsRecord]) -> String {
    let mut stages: Vec<&str> = Vec::new();
    for r in records {
        if !stages.contains(&r.stage.as_str()) {
            stages.push(&r.stage);
        }
    }
    let mut out = String::new();
    for stage in stages {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.stage == stage).collect();
        let mut cols: Vec<&str> = rows.iter().flat_map(|r| r.values.keys().map(String::as_str)).collect();
        cols.sort_unstable();
        cols.dedup();
        let mut header = vec!["epoch".to_string()];
        header.extend(cols.iter().map(|c| c.to_string()));
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut line = vec![r.epoch.to_string()];
                line.extend(cols.iter().map(|c| r.values.get(*c).map_or("-".into(), |v| format!("{v:.6}"))));
                line
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|l| l[i].len()).chain([header[i].len()]).max().unwrap())
            .collect();
        let fmt = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        let _ = writeln!(out, "== {stage} ==");
        let _ = writeln!(out, "{}", fmt(&header));
        for line in &body {
            let _ = writeln!(out, "{}", fmt(line));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_read_and_render() {
        let dir = tempfile::tempdir().unwrap();
        let log = MetricsLog::new(dir.path().join("m.jsonl"));
        log.append(&MetricsRecord::new("a", 1, [("x".to_string(), 0.5)])).unwrap();
        log.append(&MetricsRecord::new("a", 2, [("x".to_string(), 0.25), ("y".to_string(), 1.0)]))
            .unwrap();
        log.append(&MetricsRecord::new("b", 1, [("z".to_string(), 2.0)])).unwrap();
        let recs = log.read().unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[1].values["y"], 1.0);
        let table = render_table(&recs);
        assert!(table.contains("== a =="));
        assert!(table.contains("0.250000"));
        assert!(table.lines().nth(2).unwrap().trim_end().ends_with('-'));
    }

    #[test]
    fn missing_log_is_reported() {
        assert!(matches!(read_metrics("/nonexistent/m.jsonl"), Err(Error::MissingArtifact { .. })));
    }
}
