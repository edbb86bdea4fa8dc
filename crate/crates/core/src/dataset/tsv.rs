//! Minimal tab-separated table reader/writer with `n/a` for missing values.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetError, Result};

pub const MISSING: &str = "n/a";

#[derive(Debug, Clone)]
pub struct Table {
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
        let header: Vec<String> = match lines.next() {
            Some(h) if !h.trim().is_empty() => h.split('\t').map(|s| s.trim().to_string()).collect(),
            _ => {
                return Err(DatasetError::MalformedTsv {
                    path: path.to_path_buf(),
                    detail: "missing header".into(),
                })
            }
        };
        let mut rows = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split('\t').map(|s| s.trim().to_string()).collect();
            if fields.len() != header.len() {
                return Err(DatasetError::MalformedTsv {
                    path: path.to_path_buf(),
                    detail: format!(
                        "line {} has {} fields, header has {}",
                        lineno + 2,
                        fields.len(),
                        header.len()
                    ),
                });
            }
            rows.push(fields);
        }
        Ok(Table { path: path.to_path_buf(), header, rows })
    }

    /// Column positions for `names`, in order; every name must be present.
    pub fn columns(&self, names: &[&str]) -> Result<Vec<usize>> {
        names
            .iter()
            .map(|name| {
                self.header.iter().position(|h| h == name).ok_or_else(|| DatasetError::MalformedTsv {
                    path: self.path.clone(),
                    detail: format!("missing column `{name}`"),
                })
            })
            .collect()
    }

    pub fn malformed(&self, row: usize, detail: impl Into<String>) -> DatasetError {
        DatasetError::MalformedTsv {
            path: self.path.clone(),
            detail: format!("data row {}: {}", row + 1, detail.into()),
        }
    }
}

pub fn optional(field: &str) -> Option<&str> {
    if field.is_empty() || field == MISSING {
        None
    } else {
        Some(field)
    }
}

pub fn write(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join("\t");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join("\t"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}
