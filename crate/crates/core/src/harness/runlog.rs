//! Versioned comma-separated run logs.
//!
//! Layout: `#`-prefixed metadata lines (version first), one CSV header
//! row, then one numeric row per completed iteration. All numeric values
//! print in Rust's shortest round-trip form, so equal runs produce
//! byte-equal rows. Readers refuse unknown versions.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{MdgpsError, Result};
use crate::mdgps::IterationRecord;

pub const RUNLOG_VERSION: &str = "mdgps_runlog v1";

/// Fixed per-iteration columns that follow the per-condition block.
const SCALAR_COLUMNS: [&str; 13] = [
    "l_km1_km1_pi",
    "l_km1_k",
    "l_k_k",
    "l_km1_k_pi",
    "l_k_k_pi",
    "l_km1_km1",
    "local_return_mc",
    "global_return_mc",
    "success_rate",
    "mean_final_distance",
    "bound_eps_max",
    "bound_cost_rhs",
    "wall_time_s",
];

pub fn header_columns(n_conditions: usize) -> Vec<String> {
    let mut cols = vec!["iter".to_string()];
    for prefix in ["eps", "eta", "kl"] {
        for i in 0..n_conditions {
            cols.push(format!("{prefix}_c{i}"));
        }
    }
    cols.extend(SCALAR_COLUMNS.iter().map(|s| s.to_string()));
    cols
}

/// Streaming writer; one row per iteration, flushed at the iteration
/// barrier so partially failed runs keep their completed rows.
pub struct RunLogWriter {
    file: std::fs::File,
    n_conditions: usize,
    rows_written: usize,
}

impl RunLogWriter {
    pub fn create(path: &Path, n_conditions: usize, meta: &[(String, String)]) -> Result<Self> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "# {RUNLOG_VERSION}")?;
        for (key, value) in meta {
            writeln!(file, "# {key}={value}")?;
        }
        writeln!(file, "{}", header_columns(n_conditions).join(","))?;
        file.flush()?;
        Ok(Self {
            file,
            n_conditions,
            rows_written: 0,
        })
    }

    pub fn write_row(&mut self, record: &IterationRecord, wall_time_s: f64) -> Result<()> {
        if record.conditions.len() != self.n_conditions {
            return Err(MdgpsError::RunLog(format!(
                "record has {} conditions, log expects {}",
                record.conditions.len(),
                self.n_conditions
            )));
        }
        let mut vals: Vec<f64> = vec![record.iteration as f64];
        vals.extend(record.conditions.iter().map(|c| c.epsilon));
        vals.extend(record.conditions.iter().map(|c| c.eta));
        vals.extend(record.conditions.iter().map(|c| c.achieved_kl));
        vals.push(record.total(|q| q.l_km1_km1_pi));
        vals.push(record.total(|q| q.l_km1_k));
        vals.push(record.total(|q| q.l_k_k));
        vals.push(record.total(|q| q.l_km1_k_pi));
        vals.push(record.total(|q| q.l_k_k_pi));
        vals.push(record.total(|q| q.l_km1_km1));
        vals.push(record.local_mean_return);
        vals.push(record.global_mean_return);
        vals.push(record.success_rate);
        vals.push(record.mean_final_distance);
        let eps_max = record
            .bounds
            .iter()
            .flat_map(|b| b.eps_t.iter().cloned())
            .fold(0.0f64, f64::max);
        vals.push(eps_max);
        vals.push(record.bounds.iter().map(|b| b.cost_bound_rhs).sum());
        vals.push(wall_time_s);
        let row = vals
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(self.file, "{row}")?;
        self.file.flush()?;
        self.rows_written += 1;
        Ok(())
    }

    pub fn rows_written(&self) -> usize {
        self.rows_written
    }
}

/// A parsed run log.
#[derive(Debug, Clone)]
pub struct RunLog {
    pub meta: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl RunLog {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let version = lines
            .next()
            .ok_or_else(|| MdgpsError::RunLog("empty run log".into()))?;
        let version = version.trim_start_matches('#').trim();
        if version != RUNLOG_VERSION {
            return Err(MdgpsError::RunLog(format!(
                "unknown run log version '{version}' (expected '{RUNLOG_VERSION}')"
            )));
        }
        let mut meta = BTreeMap::new();
        let mut columns = Vec::new();
        let mut rows = Vec::new();
        for line in lines {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((key, value)) = rest.trim().split_once('=') {
                    meta.insert(key.trim().to_string(), value.trim().to_string());
                }
            } else if columns.is_empty() {
                columns = line.split(',').map(|s| s.trim().to_string()).collect();
            } else if !line.trim().is_empty() {
                let row: std::result::Result<Vec<f64>, _> =
                    line.split(',').map(|v| v.trim().parse::<f64>()).collect();
                let row = row.map_err(|e| MdgpsError::RunLog(format!("bad numeric row: {e}")))?;
                if row.len() != columns.len() {
                    return Err(MdgpsError::RunLog(format!(
                        "row has {} values, header has {} columns",
                        row.len(),
                        columns.len()
                    )));
                }
                rows.push(row);
            }
        }
        if columns.is_empty() {
            return Err(MdgpsError::RunLog("run log has no header row".into()));
        }
        Ok(Self {
            meta,
            columns,
            rows,
        })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn value(&self, row: usize, column: &str) -> Option<f64> {
        let idx = self.column_index(column)?;
        self.rows.get(row).map(|r| r[idx])
    }

    /// Value of `column` at the row whose `iter` field equals `iteration`.
    pub fn value_at_iteration(&self, iteration: usize, column: &str) -> Option<f64> {
        let iter_idx = self.column_index("iter")?;
        let col_idx = self.column_index(column)?;
        self.rows
            .iter()
            .find(|r| r[iter_idx] as usize == iteration)
            .map(|r| r[col_idx])
    }

    /// Rows with the wall-time column dropped, for determinism
    /// comparisons.
    pub fn rows_excluding_wall_time(&self) -> Vec<Vec<f64>> {
        let wall = self.column_index("wall_time_s");
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(i, _)| Some(*i) != wall)
                    .map(|(_, v)| *v)
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_enforced() {
        let dir = std::env::temp_dir().join(format!("mdgps-runlog-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("log.csv");
        std::fs::write(&path, "# mdgps_runlog v99\niter\n1\n").unwrap();
        match RunLog::load(&path) {
            Err(MdgpsError::RunLog(msg)) => assert!(msg.contains("v99")),
            other => panic!("expected version rejection, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_matches_condition_count() {
        let cols = header_columns(3);
        assert_eq!(cols[0], "iter");
        assert!(cols.contains(&"eps_c2".to_string()));
        assert!(cols.contains(&"kl_c0".to_string()));
        assert_eq!(cols.len(), 1 + 9 + SCALAR_COLUMNS.len());
    }
}
