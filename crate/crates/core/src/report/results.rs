use std::fs;
use std::path::{Path, PathBuf};

use crate::evaluation::Metric;

use super::{io_err, ReportError, Result};

/// Per-split metric columns read back from an experiment directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    /// Directory name, e.g. `experiment-CN_vs_AD`.
    pub name: String,
    pub metrics: Vec<(Metric, Vec<f64>)>,
}

impl ResultsTable {
    pub fn get(&self, metric: Metric) -> &[f64] {
        self.metrics.iter().find(|(m, _)| *m == metric).map(|(_, v)| v.as_slice()).unwrap_or(&[])
    }
}

pub fn read_results(dir: &Path) -> Result<ResultsTable> {
    let path = dir.join("metrics_per_split.tsv");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let malformed = |detail: String| ReportError::MalformedResults { path: PathBuf::from(&path), detail };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| malformed("empty file".into()))?.split('\t').collect();
    let columns = Metric::ALL
        .iter()
        .map(|m| header.iter().position(|h| *h == m.name()).ok_or_else(|| malformed(format!("no column {}", m.name()))))
        .collect::<Result<Vec<_>>>()?;
    let mut metrics: Vec<(Metric, Vec<f64>)> = Metric::ALL.iter().map(|&m| (m, Vec::new())).collect();
    for (row, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != header.len() {
            return Err(malformed(format!("row {} has {} fields, header {}", row + 1, fields.len(), header.len())));
        }
        for ((_, values), &c) in metrics.iter_mut().zip(&columns) {
            let v = fields[c].parse::<f64>().map_err(|e| malformed(format!("row {}: {e}", row + 1)))?;
            values.push(v);
        }
    }
    let name = dir
        .canonicalize()
        .ok()
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    Ok(ResultsTable { name, metrics })
}
